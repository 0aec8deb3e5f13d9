//! Class-probability heads, view aggregation and summary metrics.

use crate::encoders::EmbeddingTable;
use crate::error::{ensure_arg, Result};
use crate::numcore::ops::cosine_logits;
use crate::numcore::{softmax, ProbabilityVector};

pub use crate::numcore::entropy;

/// Softmax over cosine similarities of `feature` with every table row.
pub fn predict_base(feature: &[f64], table: &EmbeddingTable, tau: f64) -> Result<ProbabilityVector> {
    ensure_arg!(!table.is_empty(), "empty class table");
    softmax(&cosine_logits(feature, table.matrix())?, tau)
}

/// `beta * P(x_m; tau_aux) + (1 - beta) * P(v_pooled; tau_v)` over the novel table.
pub fn predict_novel(
    x_m: &[f64],
    v_pooled: &[f64],
    table: &EmbeddingTable,
    beta: f64,
    tau_aux: f64,
    tau_v: f64,
) -> Result<ProbabilityVector> {
    ensure_arg!((0.0..=1.0).contains(&beta), "beta must lie in [0, 1], got {beta}");
    let pa = predict_base(x_m, table, tau_aux)?;
    let pv = predict_base(v_pooled, table, tau_v)?;
    mix(&pa, &pv, beta)
}

/// Convex combination `w * a + (1 - w) * b`.
pub fn mix(a: &ProbabilityVector, b: &ProbabilityVector, w: f64) -> Result<ProbabilityVector> {
    ensure_arg!(a.len() == b.len(), "mixing distributions of length {} and {}", a.len(), b.len());
    ensure_arg!((0.0..=1.0).contains(&w), "mixing weight {w} outside [0, 1]");
    let v = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (w * x + (1.0 - w) * y).clamp(0.0, 1.0))
        .collect();
    ProbabilityVector::new(v)
}

/// Arithmetic mean of per-view distributions.
pub fn aggregate_views(scores: &[ProbabilityVector]) -> Result<ProbabilityVector> {
    ensure_arg!(!scores.is_empty(), "no views to aggregate");
    let n = scores[0].len();
    ensure_arg!(scores.iter().all(|s| s.len() == n), "views disagree on class count");
    let mut acc = vec![0.0; n];
    for s in scores {
        for (a, p) in acc.iter_mut().zip(s.values()) {
            *a += p;
        }
    }
    let k = scores.len() as f64;
    ProbabilityVector::new(acc.into_iter().map(|a| (a / k).clamp(0.0, 1.0)).collect())
}

/// `2ab / (a + b)`, defined as 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Rounds to one decimal place for reporting.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}
