//! The full multimodal pipeline: frozen video backbone, auxiliary encoder,
//! temporal heads, cross-attention fusion and the text embedding table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{CrossAttentionHead, TemporalHead};
use crate::encoders::{EmbeddingTable, PromptSet, TextConfig, TextEncoder, Vit, VitConfig};
use crate::error::{ensure_arg, MovError, Result};
use crate::numcore::nn::Mlp;
use crate::numcore::{Graph, ParamSet, Tensor, Var};

pub const VIDEO: &str = "video";
pub const AUX: &str = "aux";
pub const TEXT: &str = "text";
pub const TEMPORAL_V: &str = "temporal_v";
pub const TEMPORAL_F: &str = "temporal_f";
pub const AUDIO_MLP: &str = "audio_mlp";
pub const CROSS_V: &str = "cross_v";
pub const CROSS_X: &str = "cross_x";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxModality {
    Flow,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    VideoOnly,
    AuxOnly,
    ScoreFusion,
    CrossAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::VideoOnly,
        FusionMode::AuxOnly,
        FusionMode::ScoreFusion,
        FusionMode::CrossAttention,
    ];

    pub fn uses_video_head(self) -> bool {
        self != FusionMode::AuxOnly
    }

    pub fn uses_aux(self) -> bool {
        self != FusionMode::VideoOnly
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionMode::VideoOnly => "video-only",
            FusionMode::AuxOnly => "aux-only",
            FusionMode::ScoreFusion => "score-fusion",
            FusionMode::CrossAttention => "cross-attention",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = MovError;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| MovError::invalid(format!("unknown fusion mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub text: TextConfig,
    pub aux: AuxModality,
    pub fusion: FusionMode,
    pub temporal_layers: usize,
    pub head_heads: usize,
    pub head_mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            text: TextConfig::default(),
            aux: AuxModality::Flow,
            fusion: FusionMode::CrossAttention,
            temporal_layers: 2,
            head_heads: 4,
            head_mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.text.embed_dim != self.vit.embed_dim {
            return Err(MovError::config(format!(
                "text width {} must equal vision width {}",
                self.text.embed_dim, self.vit.embed_dim
            )));
        }
        if self.head_heads == 0 || self.vit.embed_dim % self.head_heads != 0 {
            return Err(MovError::config("fusion heads must divide the embedding width"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.vit.embed_dim
    }
}

/// Auxiliary modality input of one clip.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxInput {
    /// One flow image (`3 x H x W`) per sampled frame.
    Flow(Vec<Tensor>),
    /// One three-channel spectrogram (`3 x mel x frames`).
    Audio(Tensor),
}

/// Model-ready tensors of one clip view.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput {
    pub frames: Vec<Tensor>,
    pub aux: AuxInput,
}

/// Graph handles produced by [`MovModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Frozen backbone features, `(B * N) x d`.
    pub v: Var,
    /// Temporal mean of `v`, `B x d`.
    pub v_pooled: Var,
    pub v_m: Option<Var>,
    pub x_m: Option<Var>,
}

/// Plain-tensor features of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub v: Tensor,
    pub v_pooled: Vec<f64>,
    pub v_m: Option<Vec<f64>>,
    pub x_m: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct MovModel {
    pub cfg: ModelConfig,
    pub video: Vit,
    pub aux: Vit,
    pub text: TextEncoder,
    pub temporal_v: TemporalHead,
    pub temporal_f: TemporalHead,
    pub audio_mlp: Mlp,
    pub cross_v: CrossAttentionHead,
    pub cross_x: CrossAttentionHead,
}

impl MovModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim();
        let hidden = d * cfg.head_mlp_ratio;
        Ok(Self {
            video: Vit::new(VIDEO, cfg.vit.clone())?,
            aux: Vit::new(AUX, cfg.vit.clone())?,
            text: TextEncoder::new(TEXT, cfg.text.clone())?,
            temporal_v: TemporalHead::new(TEMPORAL_V, d, cfg.temporal_layers, cfg.head_heads, hidden)?,
            temporal_f: TemporalHead::new(TEMPORAL_F, d, cfg.temporal_layers, cfg.head_heads, hidden)?,
            audio_mlp: Mlp::new(AUDIO_MLP, d, hidden),
            cross_v: CrossAttentionHead::new(CROSS_V, d, cfg.head_heads, hidden)?,
            cross_x: CrossAttentionHead::new(CROSS_X, d, cfg.head_heads, hidden)?,
            cfg,
        })
    }

    /// Fresh backbone (video + text) parameters.
    pub fn init_backbone(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        self.video.init(&mut ps, &mut rng);
        self.text.init(&mut ps, &mut rng);
        ps
    }

    /// Full parameter set: backbone copied in, auxiliary encoder initialised
    /// bitwise from the video encoder, heads for the configured mode drawn
    /// from `seed`.
    pub fn params_from_backbone(&self, backbone: &ParamSet, seed: u64) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        let video = backbone.extract_prefix(&format!("{VIDEO}."));
        let text = backbone.extract_prefix(&format!("{TEXT}."));
        if video.is_empty() || text.is_empty() {
            return Err(MovError::validation("backbone lacks video or text parameters"));
        }
        ps.merge_prefixed(&format!("{VIDEO}."), &video);
        ps.merge_prefixed(&format!("{TEXT}."), &text);
        if self.cfg.fusion.uses_aux() {
            ps.merge_prefixed(&format!("{AUX}."), &video);
        }
        ps.reset_moments();
        for (_, p) in ps.iter_mut() {
            p.trainable = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = self.cfg.fusion;
        if mode.uses_video_head() {
            self.temporal_v.init(&mut ps, &mut rng);
        }
        if mode.uses_aux() {
            match self.cfg.aux {
                AuxModality::Flow => self.temporal_f.init(&mut ps, &mut rng),
                AuxModality::Audio => self.audio_mlp.init(&mut ps, &mut rng),
            }
        }
        if mode == FusionMode::CrossAttention {
            self.cross_v.init(&mut ps, &mut rng);
            self.cross_x.init(&mut ps, &mut rng);
        }
        // every expected tensor must be present with the right shape
        let mut probe = ParamSet::new();
        self.video.init(&mut probe, &mut rng);
        for (name, p) in probe.iter() {
            let got = ps.value(name)?;
            if got.shape() != p.value.shape() {
                return Err(MovError::validation(format!(
                    "backbone tensor `{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(ps)
    }

    /// Randomly initialised backbone plus heads (no pretraining).
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.params_from_backbone(&self.init_backbone(seed), seed.wrapping_add(1))
    }

    /// Zeroes both cross-attention heads' output projections.
    pub fn zero_fusion_projections(&self, ps: &mut ParamSet) -> Result<()> {
        self.cross_v.zero_output_projections(ps)?;
        self.cross_x.zero_output_projections(ps)
    }

    /// Frozen-backbone features `v` of every frame, `(B * N) x d`.
    pub fn video_features(&self, g: &mut Graph, clips: &[&ClipInput]) -> Result<(Var, Vec<usize>)> {
        ensure_arg!(!clips.is_empty(), "empty batch");
        let frames: Vec<&Tensor> = clips.iter().flat_map(|c| c.frames.iter()).collect();
        let seg: Vec<usize> = clips.iter().map(|c| c.frames.len()).collect();
        ensure_arg!(seg.iter().all(|&n| n > 0), "clip without frames");
        Ok((self.video.forward(g, &frames)?, seg))
    }

    /// Auxiliary tokens `x_t` and their per-clip counts.
    fn aux_tokens(&self, g: &mut Graph, clips: &[&ClipInput]) -> Result<(Var, Vec<usize>)> {
        match self.cfg.aux {
            AuxModality::Flow => {
                let mut imgs = Vec::new();
                let mut seg = Vec::new();
                for c in clips {
                    let AuxInput::Flow(f) = &c.aux else {
                        return Err(MovError::invalid("model expects flow input"));
                    };
                    ensure_arg!(!f.is_empty(), "clip without flow images");
                    imgs.extend(f.iter());
                    seg.push(f.len());
                }
                let f = self.aux.forward(g, &imgs)?;
                Ok((self.temporal_f.forward(g, f, &seg)?, seg))
            }
            AuxModality::Audio => {
                let mut specs = Vec::new();
                for c in clips {
                    let AuxInput::Audio(s) = &c.aux else {
                        return Err(MovError::invalid("model expects audio input"));
                    };
                    specs.push(s);
                }
                let a = self.aux.forward(g, &specs)?;
                Ok((self.audio_mlp.forward(g, a)?, vec![1; clips.len()]))
            }
        }
    }

    /// Records the forward pass of a batch of clips on `g`.
    pub fn forward(&self, g: &mut Graph, clips: &[&ClipInput]) -> Result<ForwardVars> {
        let (v, seg) = self.video_features(g, clips)?;
        let v_pooled = g.mean_segments(v, &seg)?;
        let mode = self.cfg.fusion;
        let v_t = if mode.uses_video_head() {
            Some(self.temporal_v.forward(g, v, &seg)?)
        } else {
            None
        };
        let x = if mode.uses_aux() {
            Some(self.aux_tokens(g, clips)?)
        } else {
            None
        };
        let (v_m, x_m) = match (mode, v_t, x) {
            (FusionMode::VideoOnly, Some(v_t), _) => (Some(g.mean_segments(v_t, &seg)?), None),
            (FusionMode::AuxOnly, _, Some((x_t, xs))) => (None, Some(g.mean_segments(x_t, &xs)?)),
            (FusionMode::ScoreFusion, Some(v_t), Some((x_t, xs))) => (
                Some(g.mean_segments(v_t, &seg)?),
                Some(g.mean_segments(x_t, &xs)?),
            ),
            (FusionMode::CrossAttention, Some(v_t), Some((x_t, xs))) => (
                Some(self.cross_v.forward(g, v_t, x_t, &seg, &xs)?),
                Some(self.cross_x.forward(g, x_t, v, &xs, &seg)?),
            ),
            _ => unreachable!("mode flags cover every branch"),
        };
        Ok(ForwardVars {
            v,
            v_pooled,
            v_m,
            x_m,
        })
    }

    /// Forward pass without gradient bookkeeping, split per clip.
    pub fn features(&self, params: &ParamSet, clips: &[&ClipInput]) -> Result<Vec<FeatureBundle>> {
        let mut g = Graph::new(params);
        let fv = self.forward(&mut g, clips)?;
        let v = g.value(fv.v);
        let mut out = Vec::with_capacity(clips.len());
        let mut off = 0;
        for (i, c) in clips.iter().enumerate() {
            let n = c.frames.len();
            let row = |var: Option<Var>| var.map(|x| g.value(x).row(i).to_vec());
            out.push(FeatureBundle {
                v: v.slice_rows(off, n)?,
                v_pooled: g.value(fv.v_pooled).row(i).to_vec(),
                v_m: row(fv.v_m),
                x_m: row(fv.x_m),
            });
            off += n;
        }
        Ok(out)
    }

    /// Prompt-ensembled unit embeddings of `classes` under the frozen text encoder.
    pub fn embedding_table(&self, params: &ParamSet, classes: &[String], prompts: &PromptSet) -> Result<EmbeddingTable> {
        crate::encoders::build_embedding_table(classes, prompts, params, &self.text)
    }
}
