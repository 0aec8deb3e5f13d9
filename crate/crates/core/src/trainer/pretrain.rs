//! Contrastive image-text pretraining of the video and text encoders.
//!
//! Produces the backbone that the main training run keeps frozen: a
//! symmetric InfoNCE loss over a batch of single frames and their captions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{augmentation_seed, LossPoint};
use crate::error::{ensure_arg, MovError, Result};
use crate::fusion::MovModel;
use crate::numcore::{adamw_step, half_cosine_lr, AdamWConfig, Graph, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Image-caption pairs drawn per epoch.
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            pairs_per_epoch: 256,
            batch_size: 32,
            base_lr: 1e-4,
            weight_decay: 0.05,
            tau: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(MovError::config("pretraining needs epochs >= 1 and batch size >= 2"));
        }
        if !(self.base_lr > 0.0 && self.tau > 0.0 && self.weight_decay >= 0.0) {
            return Err(MovError::config("pretraining lr and tau must be positive"));
        }
        Ok(())
    }
}

/// Image-caption pairs; `sample` must be a pure function of `(i, seed)`.
pub trait CaptionSampler: Sync {
    fn len(&self) -> usize;
    fn sample(&self, i: usize, seed: u64) -> Result<(Tensor, String)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: ParamSet,
    pub curve: Vec<LossPoint>,
}

/// Trains every parameter of `backbone` (video and text encoders).
pub fn pretrain(
    model: &MovModel,
    mut backbone: ParamSet,
    data: &dyn CaptionSampler,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    ensure_arg!(data.len() >= 2, "pretraining needs at least two pairs");
    for (_, p) in backbone.iter_mut() {
        p.trainable = true;
    }
    backbone.reset_moments();
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let n = data.len();
    let total = (n.div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut pairs: Vec<(Tensor, String)> = batch
                .par_iter()
                .map(|&i| data.sample(i, augmentation_seed(cfg.seed, epoch, i)))
                .collect::<Result<_>>()?;
            // images of one shape are encoded together; the loss is invariant
            // to permuting pairs
            pairs.sort_by(|a, b| a.0.shape().cmp(b.0.shape()));
            let ids = pairs
                .iter()
                .map(|(_, c)| model.text.ids(c))
                .collect::<Result<Vec<_>>>()?;
            let images: Vec<&Tensor> = pairs.iter().map(|(t, _)| t).collect();
            let lr = half_cosine_lr(cfg.base_lr, step, total);
            let (loss, grads) = {
                let mut g = Graph::new(&backbone);
                let groups: Vec<_> = images
                    .chunk_by(|a, b| a.shape() == b.shape())
                    .map(|grp| model.video.forward(&mut g, grp))
                    .collect::<Result<_>>()?;
                let img = if groups.len() == 1 { groups[0] } else { g.concat_rows(&groups)? };
                let txt = model.text.forward(&mut g, &ids)?;
                let img = g.l2_normalize_rows(img)?;
                let txt = g.l2_normalize_rows(txt)?;
                let sims = g.matmul_bt(img, txt)?;
                let logits = g.scale(sims, 1.0 / cfg.tau)?;
                let logits_t = g.transpose(logits)?;
                let labels: Vec<usize> = (0..batch.len()).collect();
                let li = g.cross_entropy(logits, &labels)?;
                let lt = g.cross_entropy(logits_t, &labels)?;
                let loss = g.weighted_sum(&[(li, 0.5), (lt, 0.5)])?;
                let value = g.value(loss).data()[0];
                ensure_arg!(value.is_finite(), "non-finite pretraining loss at step {step}");
                (value, g.backward(loss)?)
            };
            step += 1;
            adamw_step(&mut backbone, &grads, lr, &opt, step)?;
            curve.push(LossPoint { step: step - 1, lr, loss });
        }
    }
    Ok(PretrainOutcome { backbone, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{TextConfig, VitConfig};
    use crate::fusion::{AuxModality, FusionMode, ModelConfig};

    struct Colors;

    impl CaptionSampler for Colors {
        fn len(&self) -> usize {
            8
        }

        fn sample(&self, i: usize, _seed: u64) -> Result<(Tensor, String)> {
            let c = i % 4;
            let img = Tensor::from_fn(&[3, 8, 8], |k| if k / 64 == c % 3 { 1.0 + c as f64 * 0.3 } else { -1.0 });
            Ok((img, ["red", "green", "blue", "pink"][c].to_string()))
        }
    }

    #[test]
    fn contrastive_loss_decreases() {
        let m = MovModel::new(ModelConfig {
            vit: VitConfig {
                image_hw: (8, 8),
                patch_size: 4,
                embed_dim: 8,
                layers: 1,
                heads: 2,
                ..VitConfig::default()
            },
            text: TextConfig {
                vocab_size: 17,
                embed_dim: 8,
                layers: 1,
                heads: 2,
                max_tokens: 4,
                ..TextConfig::default()
            },
            aux: AuxModality::Flow,
            fusion: FusionMode::CrossAttention,
            temporal_layers: 1,
            head_heads: 2,
            head_mlp_ratio: 2,
        })
        .unwrap();
        let cfg = PretrainConfig {
            epochs: 40,
            batch_size: 4,
            base_lr: 1e-2,
            ..PretrainConfig::default()
        };
        let out = pretrain(&m, m.init_backbone(0), &Colors, &cfg).unwrap();
        let first = out.curve[..2].iter().map(|p| p.loss).sum::<f64>();
        let last = out.curve[out.curve.len() - 2..].iter().map(|p| p.loss).sum::<f64>();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
