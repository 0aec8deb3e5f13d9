//! Temporal fusion and cross-attention fusion heads.

use rand::Rng;

use crate::error::{ensure_arg, Result};
use crate::numcore::nn::{EncoderBlock, LayerNorm, Mlp, MultiHeadAttention};
use crate::numcore::{Graph, ParamSet, Tensor, Var};

/// Stack of pre-norm self-attention blocks over the frames of each clip.
#[derive(Clone, Debug)]
pub struct TemporalHead {
    pub prefix: String,
    pub blocks: Vec<EncoderBlock>,
}

impl TemporalHead {
    pub fn new(prefix: impl Into<String>, dim: usize, layers: usize, heads: usize, hidden: usize) -> Result<Self> {
        let prefix = prefix.into();
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(format!("{prefix}.block{i}"), dim, heads, hidden))
            .collect::<Result<_>>()?;
        Ok(Self { prefix, blocks })
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        for b in &self.blocks {
            b.init(ps, rng);
        }
    }

    /// `seg[i]` frames of clip `i` stacked in `x`; token counts are preserved.
    pub fn forward(&self, g: &mut Graph, x: Var, seg: &[usize]) -> Result<Var> {
        let mut z = x;
        for b in &self.blocks {
            z = b.forward(g, z, seg)?;
        }
        Ok(z)
    }

    pub fn zero_output_projections(&self, ps: &mut ParamSet) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.zero_output_projections(ps))
    }
}

/// One decoder-style layer: `h = q + MCA(LN_q(q), LN_kv(kv))`,
/// `out = h + MLP(LN(h))`, then mean over the query tokens of each clip.
#[derive(Clone, Debug)]
pub struct CrossAttentionHead {
    pub prefix: String,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionHead {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self {
            ln_q: LayerNorm::new(format!("{prefix}.ln_q"), dim),
            ln_kv: LayerNorm::new(format!("{prefix}.ln_kv"), dim),
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), dim, heads)?,
            ln_mlp: LayerNorm::new(format!("{prefix}.ln_mlp"), dim),
            mlp: Mlp::new(&format!("{prefix}.mlp"), dim, hidden),
            prefix,
        })
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.ln_q.init(ps);
        self.ln_kv.init(ps);
        self.attn.init(ps, rng);
        self.ln_mlp.init(ps);
        self.mlp.init(ps, rng);
    }

    /// Token-level output (before pooling).
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        query: Var,
        kv: Var,
        q_seg: &[usize],
        kv_seg: &[usize],
    ) -> Result<Var> {
        let qn = self.ln_q.forward(g, query)?;
        let kn = self.ln_kv.forward(g, kv)?;
        let a = self.attn.forward(g, qn, kn, q_seg, kv_seg)?;
        let h = g.add(a, query)?;
        let hn = self.ln_mlp.forward(g, h)?;
        let m = self.mlp.forward(g, hn)?;
        g.add(m, h)
    }

    /// Pooled fused vector per clip, `len(q_seg) x d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        kv: Var,
        q_seg: &[usize],
        kv_seg: &[usize],
    ) -> Result<Var> {
        let t = self.forward_tokens(g, query, kv, q_seg, kv_seg)?;
        g.mean_segments(t, q_seg)
    }

    pub fn zero_output_projections(&self, ps: &mut ParamSet) -> Result<()> {
        self.attn.out.zero(ps)?;
        self.mlp.fc2.zero(ps)
    }
}

fn check_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let (na, da) = a.expect_matrix(what)?;
    let (nb, db) = b.expect_matrix(what)?;
    ensure_arg!(da == db, "{what}: width {da} vs {db}");
    ensure_arg!(na > 0 && nb > 0, "{what}: empty token set");
    Ok((na, nb, da))
}

/// Temporally fused features of one clip (`N x d` in, `N x d` out).
pub fn temporal_fuse(features: &Tensor, params: &ParamSet, head: &TemporalHead) -> Result<Tensor> {
    let (n, _) = features.expect_matrix("temporal features")?;
    ensure_arg!(n >= 1, "temporal fusion of zero frames");
    let mut g = Graph::new(params);
    let x = g.constant(features.clone());
    let out = head.forward(&mut g, x, &[n])?;
    Ok(g.value(out).clone())
}

/// `a_t = MLP(a)` for a single audio token.
pub fn audio_temporal_head(a: &Tensor, params: &ParamSet, mlp: &Mlp) -> Result<Tensor> {
    let (n, d) = a.expect_matrix("audio embedding")?;
    ensure_arg!(n == 1, "audio head expects one token, got {n}");
    ensure_arg!(d == mlp.fc1.d_in, "audio embedding width {d} vs MLP input {}", mlp.fc1.d_in);
    let mut g = Graph::new(params);
    let x = g.constant(a.clone());
    let out = mlp.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}

/// `v_m`: video tokens attend to auxiliary tokens; pooled to length `d`.
pub fn fuse_video(v_t: &Tensor, x_t: &Tensor, params: &ParamSet, head: &CrossAttentionHead) -> Result<Tensor> {
    let (n, nk, d) = check_dims(v_t, x_t, "fuse_video")?;
    let mut g = Graph::new(params);
    let q = g.constant(v_t.clone());
    let kv = g.constant(x_t.clone());
    let out = head.forward(&mut g, q, kv, &[n], &[nk])?;
    g.value(out).clone().reshape(&[d])
}

/// `x_m`: auxiliary tokens attend to the frozen backbone features `v`.
pub fn fuse_auxiliary(x_t: &Tensor, v: &Tensor, params: &ParamSet, head: &CrossAttentionHead) -> Result<Tensor> {
    let (n, nk, d) = check_dims(x_t, v, "fuse_auxiliary")?;
    let mut g = Graph::new(params);
    let q = g.constant(x_t.clone());
    let kv = g.constant(v.clone());
    let out = head.forward(&mut g, q, kv, &[n], &[nk])?;
    g.value(out).clone().reshape(&[d])
}
