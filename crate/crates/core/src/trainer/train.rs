//! Base-class training loop and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::freeze::{build_freeze_plan, TrainableLayers};
use super::loss::{mov_loss_graph, predictions};
use crate::encoders::EmbeddingTable;
use crate::error::{ensure_arg, MovError, Result};
use crate::fusion::{ClipInput, MovModel};
use crate::numcore::io::save_params;
use crate::numcore::{adamw_step, half_cosine_lr, AdamWConfig, Graph, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub trainable_layers: TrainableLayers,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 0.01,
            batch_size: 32,
            epochs: 50,
            base_lr: 1e-3,
            weight_decay: 0.05,
            trainable_layers: TrainableLayers::All,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MovError::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(MovError::config("tau must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(MovError::config("batch size and epochs must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(MovError::config("learning rate must be positive, weight decay non-negative"));
        }
        Ok(())
    }
}

/// Source of labelled training clips.
///
/// `sample` draws one augmented view of item `i`; it must be a pure function
/// of `(i, seed)`.
pub trait ClipSampler: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn sample(&self, i: usize, seed: u64) -> Result<ClipInput>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A fixed list of clips, returned unchanged for every seed.
pub struct FixedClips {
    pub clips: Vec<ClipInput>,
    pub labels: Vec<usize>,
}

impl ClipSampler for FixedClips {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn sample(&self, i: usize, _seed: u64) -> Result<ClipInput> {
        Ok(self.clips[i].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub curve: Vec<LossPoint>,
    /// Accuracy (percent) on the augmented views seen in the final epoch.
    pub final_epoch_acc: f64,
}

/// Seed of the augmentation drawn for item `i` in `epoch`.
pub fn augmentation_seed(seed: u64, epoch: usize, i: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [epoch as u64, i as u64] {
        h = (h ^ x).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}

/// Trains `params` on base-class clips. Frozen parameters stay bitwise
/// untouched; the run is a pure function of its inputs.
pub fn train(
    model: &MovModel,
    mut params: ParamSet,
    data: &dyn ClipSampler,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_arg!(!data.is_empty(), "empty training set");
    for i in 0..data.len() {
        ensure_arg!(data.label(i) < table.len(), "label {} out of range", data.label(i));
    }
    build_freeze_plan(cfg.trainable_layers, model, &params)?.apply(&mut params)?;
    params.reset_moments();
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    let mut final_epoch_acc = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let clips: Vec<ClipInput> = batch
                .par_iter()
                .map(|&i| data.sample(i, augmentation_seed(cfg.seed, epoch, i)))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let refs: Vec<&ClipInput> = clips.iter().collect();
            let lr = half_cosine_lr(cfg.base_lr, step, total);
            let (loss, grads, hits) = {
                let mut g = Graph::new(&params);
                let fv = model.forward(&mut g, &refs)?;
                let lv = mov_loss_graph(&mut g, fv.v_m, fv.x_m, table, &labels, cfg.alpha, cfg.tau)?;
                let loss = g.value(lv.loss).data()[0];
                ensure_arg!(loss.is_finite(), "non-finite loss at step {step}");
                let logits = lv.logits_v.or(lv.logits_x).expect("loss has a branch");
                let hits = predictions(g.value(logits))
                    .iter()
                    .zip(&labels)
                    .filter(|(p, y)| p == y)
                    .count();
                (loss, g.backward(lv.loss)?, hits)
            };
            correct += hits;
            step += 1;
            adamw_step(&mut params, &grads, lr, &opt, step)?;
            curve.push(LossPoint { step: step - 1, lr, loss });
        }
        final_epoch_acc = 100.0 * correct as f64 / n as f64;
    }
    Ok(TrainOutcome {
        params,
        curve,
        final_epoch_acc,
    })
}

pub const LOSS_CURVE: &str = "loss_curve.csv";

pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MovError::Serde(e.to_string()))?;
    for p in curve {
        w.serialize(p).map_err(|e| MovError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| MovError::io(path, e))
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MovError::format(path, e.to_string()))?;
    r.deserialize()
        .map(|x| x.map_err(|e| MovError::format(path, e.to_string())))
        .collect()
}

/// Writes parameters, the serialised config snapshot and the loss curve.
pub fn save_checkpoint(
    dir: &Path,
    params: &ParamSet,
    config_name: &str,
    config_text: &str,
    curve: &[LossPoint],
) -> Result<()> {
    save_params(dir, params)?;
    let cfg_path = dir.join(config_name);
    fs::write(&cfg_path, config_text).map_err(|e| MovError::io(&cfg_path, e))?;
    write_loss_curve(&dir.join(LOSS_CURVE), curve)
}
