//! Hashed-token text encoder, prompt templates and class embedding tables.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, MovError, Result};
use crate::numcore::nn::{EncoderBlock, LayerNorm};
use crate::numcore::params::init;
use crate::numcore::{Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Longer token sequences are truncated.
    pub max_tokens: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            max_tokens: 16,
        }
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Token ids of `text` in a hashed table of `vocab_size` rows.
pub fn token_ids(text: &str, vocab_size: usize, max_tokens: usize) -> Result<Vec<usize>> {
    if vocab_size == 0 {
        return Err(MovError::config("text vocabulary is empty"));
    }
    let ids: Vec<usize> = tokenize(text)
        .iter()
        .take(max_tokens)
        .map(|t| (fnv1a(t) % vocab_size as u64) as usize)
        .collect();
    ensure_arg!(!ids.is_empty(), "text `{text}` has no tokens");
    Ok(ids)
}

/// Templates with exactly one `{}` slot for the class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    templates: Vec<String>,
}

pub const DEFAULT_TEMPLATES: [&str; 28] = [
    "a video of a person doing {}.",
    "a video of {}.",
    "a clip of {}.",
    "a short video showing {}.",
    "footage of {}.",
    "a recording of {}.",
    "a video clip of {}.",
    "an example of {}.",
    "a demonstration of {}.",
    "a scene with {}.",
    "a moving picture of {}.",
    "a video featuring {}.",
    "a blurry video of {}.",
    "a low resolution video of {}.",
    "a close up video of {}.",
    "a dark video of {}.",
    "a bright video of {}.",
    "a noisy clip of {}.",
    "a good video of {}.",
    "a cropped video of {}.",
    "an animation of {}.",
    "a synthetic video of {}.",
    "a video that shows {}.",
    "watch {} in this clip.",
    "{} captured on video.",
    "a sequence of frames of {}.",
    "a snippet of {}.",
    "this is a video of {}.",
];

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        ensure_arg!(!templates.is_empty(), "prompt set is empty");
        for t in &templates {
            ensure_arg!(
                t.matches("{}").count() == 1,
                "template `{t}` must contain exactly one {{}} slot"
            );
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn fill(&self, name: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replacen("{}", name, 1)).collect()
    }
}

/// Transformer over hashed tokens with mean pooling and a final layer norm.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub prefix: String,
    pub cfg: TextConfig,
    pub blocks: Vec<EncoderBlock>,
    pub ln_final: LayerNorm,
}

impl TextEncoder {
    pub fn new(prefix: impl Into<String>, cfg: TextConfig) -> Result<Self> {
        if cfg.vocab_size == 0 {
            return Err(MovError::config("text vocabulary is empty"));
        }
        if cfg.max_tokens == 0 {
            return Err(MovError::config("text max_tokens must be positive"));
        }
        let prefix = prefix.into();
        let d = cfg.embed_dim;
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(format!("{prefix}.block{i}"), d, cfg.heads, d * cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            ln_final: LayerNorm::new(format!("{prefix}.ln_final"), d),
            blocks,
            prefix,
            cfg,
        })
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        let d = self.cfg.embed_dim;
        ps.insert(
            format!("{}.tok", self.prefix),
            init::normal(&[self.cfg.vocab_size, d], init::WEIGHT_STD, rng),
            true,
        );
        ps.insert(
            format!("{}.pos", self.prefix),
            init::normal(&[self.cfg.max_tokens, d], init::WEIGHT_STD, rng),
            true,
        );
        for b in &self.blocks {
            b.init(ps, rng);
        }
        self.ln_final.init(ps);
    }

    pub fn ids(&self, text: &str) -> Result<Vec<usize>> {
        token_ids(text, self.cfg.vocab_size, self.cfg.max_tokens)
    }

    /// Encodes token sequences into `B x d` (not normalised).
    pub fn forward(&self, g: &mut Graph, seqs: &[Vec<usize>]) -> Result<Var> {
        ensure_arg!(!seqs.is_empty(), "no text to encode");
        ensure_arg!(seqs.iter().all(|s| !s.is_empty()), "empty token sequence");
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let tok = g.param(&format!("{}.tok", self.prefix))?;
        let pos = g.param(&format!("{}.pos", self.prefix))?;
        let x = g.gather_rows(tok, &flat)?;
        let p = g.gather_rows(pos, &positions)?;
        let mut z = g.add(x, p)?;
        let seg: Vec<usize> = seqs.iter().map(Vec::len).collect();
        for b in &self.blocks {
            z = b.forward(g, z, &seg)?;
        }
        let pooled = g.mean_segments(z, &seg)?;
        self.ln_final.forward(g, pooled)
    }

    /// Prompt-ensembled unit embeddings, one row per name.
    pub fn class_embeddings(&self, g: &mut Graph, names: &[String], prompts: &PromptSet) -> Result<Var> {
        let mut seqs = Vec::with_capacity(names.len() * prompts.len());
        for n in names {
            ensure_arg!(!n.trim().is_empty(), "empty class name");
            for s in prompts.fill(n) {
                seqs.push(self.ids(&s)?);
            }
        }
        let e = self.forward(g, &seqs)?;
        let m = g.mean_segments(e, &vec![prompts.len(); names.len()])?;
        g.l2_normalize_rows(m)
    }
}

/// Class names with their unit-norm text embeddings (row `i` for `names[i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    names: Vec<String>,
    matrix: Tensor,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, matrix: Tensor) -> Result<Self> {
        let (rows, _) = matrix.expect_matrix("embedding table")?;
        ensure_arg!(rows == names.len(), "{} names for {rows} rows", names.len());
        let unique: BTreeSet<&String> = names.iter().collect();
        ensure_arg!(unique.len() == names.len(), "duplicate class names in table");
        for i in 0..rows {
            let n = matrix.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            ensure_arg!((n - 1.0).abs() <= 1e-6, "row {i} has norm {n}");
        }
        Ok(Self { names, matrix })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Unit embedding of one class averaged over all templates.
pub fn encode_class(
    name: &str,
    prompts: &PromptSet,
    params: &ParamSet,
    enc: &TextEncoder,
) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let v = enc.class_embeddings(&mut g, &[name.to_string()], prompts)?;
    g.value(v).clone().reshape(&[enc.cfg.embed_dim])
}

pub fn build_embedding_table(
    classes: &[String],
    prompts: &PromptSet,
    params: &ParamSet,
    enc: &TextEncoder,
) -> Result<EmbeddingTable> {
    ensure_arg!(!classes.is_empty(), "no classes for embedding table");
    let unique: BTreeSet<&String> = classes.iter().collect();
    ensure_arg!(unique.len() == classes.len(), "duplicate class names");
    let mut g = Graph::new(params);
    let v = enc.class_embeddings(&mut g, classes, prompts)?;
    EmbeddingTable::new(classes.to_vec(), g.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc() -> (TextEncoder, ParamSet) {
        let e = TextEncoder::new(
            "text",
            TextConfig {
                embed_dim: 16,
                vocab_size: 97,
                ..Default::default()
            },
        )
        .unwrap();
        let mut ps = ParamSet::new();
        e.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(1));
        (e, ps)
    }

    #[test]
    fn tokenizer_splits_and_lowercases() {
        assert_eq!(tokenize("A video, of Red-Circle!"), vec!["a", "video", "of", "red", "circle"]);
        let a = token_ids("Red circle", 50, 8).unwrap();
        let b = token_ids("red CIRCLE.", 50, 8).unwrap();
        assert_eq!(a, b);
        assert!(matches!(token_ids("x", 0, 8), Err(MovError::Config(_))));
        assert!(token_ids("...", 10, 8).is_err());
    }

    #[test]
    fn templates_have_one_slot() {
        let p = PromptSet::default();
        assert_eq!(p.len(), 28);
        assert!(PromptSet::new(p.templates().to_vec()).is_ok());
        assert!(PromptSet::new(vec!["no slot".into()]).is_err());
        assert!(PromptSet::new(vec!["{} and {}".into()]).is_err());
        assert!(PromptSet::new(vec![]).is_err());
    }

    #[test]
    fn unit_norm_and_duplicate_templates() {
        let (e, ps) = enc();
        let one = PromptSet::new(vec!["a video of {}.".into()]).unwrap();
        let two = PromptSet::new(vec!["a video of {}.".into(); 2]).unwrap();
        let a = encode_class("red square", &one, &ps, &e).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-6);
        let b = encode_class("red square", &two, &ps, &e).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn table_consistency_and_distinct_rows() {
        let (e, ps) = enc();
        let p = PromptSet::default();
        let names: Vec<String> = ["red square", "blue circle", "green star"].iter().map(|s| s.to_string()).collect();
        let t = build_embedding_table(&names, &p, &ps, &e).unwrap();
        assert_eq!(t.len(), 3);
        for (i, n) in names.iter().enumerate() {
            let r = encode_class(n, &p, &ps, &e).unwrap();
            assert!(t.matrix().row(i).iter().zip(r.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let s = crate::numcore::cosine_similarity(t.matrix().row(0), t.matrix().row(1)).unwrap();
        assert!(s < 1.0 - 1e-6);
        let dup = vec!["a b".to_string(), "a b".to_string()];
        assert!(build_embedding_table(&dup, &p, &ps, &e).is_err());
    }
}
