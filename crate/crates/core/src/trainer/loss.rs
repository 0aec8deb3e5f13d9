//! The alpha-weighted dual classification loss over cosine logits.

use crate::encoders::EmbeddingTable;
use crate::error::{ensure_arg, Result};
use crate::numcore::ops::cosine_logits;
use crate::numcore::{Graph, Tensor, Var};

fn check_weights(alpha: f64, tau: f64) -> Result<()> {
    ensure_arg!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1], got {alpha}");
    ensure_arg!(tau > 0.0 && tau.is_finite(), "tau must be positive, got {tau}");
    Ok(())
}

fn cross_entropy_row(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Loss of one sample:
/// `alpha * CE(cos(v_m, B) / tau, y) + (1 - alpha) * CE(cos(x_m, B) / tau, y)`.
pub fn mov_loss(
    v_m: &[f64],
    x_m: &[f64],
    table: &EmbeddingTable,
    label: usize,
    alpha: f64,
    tau: f64,
) -> Result<f64> {
    check_weights(alpha, tau)?;
    ensure_arg!(label < table.len(), "label {label} out of range for {} classes", table.len());
    let branch = |q: &[f64]| -> Result<f64> {
        let logits: Vec<f64> = cosine_logits(q, table.matrix())?.iter().map(|s| s / tau).collect();
        Ok(cross_entropy_row(&logits, label))
    };
    let mut loss = 0.0;
    if alpha > 0.0 {
        loss += alpha * branch(v_m)?;
    }
    if alpha < 1.0 {
        loss += (1.0 - alpha) * branch(x_m)?;
    }
    Ok(loss)
}

/// Graph handles of the batch loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub logits_v: Option<Var>,
    pub logits_x: Option<Var>,
}

/// Scaled cosine logits `B x p` of `features` against unit rows `table`.
pub fn cosine_logits_var(g: &mut Graph, features: Var, table: Var, tau: f64) -> Result<Var> {
    let unit = g.l2_normalize_rows(features)?;
    let sims = g.matmul_bt(unit, table)?;
    g.scale(sims, 1.0 / tau)
}

/// Batch-mean loss recorded on `g`.
///
/// A missing branch hands its weight to the other one, so single-modality
/// pipelines train on plain cross-entropy.
pub fn mov_loss_graph(
    g: &mut Graph,
    v_m: Option<Var>,
    x_m: Option<Var>,
    table: &EmbeddingTable,
    labels: &[usize],
    alpha: f64,
    tau: f64,
) -> Result<LossVars> {
    check_weights(alpha, tau)?;
    let (wv, wx) = match (v_m, x_m) {
        (Some(_), Some(_)) => (alpha, 1.0 - alpha),
        (Some(_), None) => (1.0, 0.0),
        (None, Some(_)) => (0.0, 1.0),
        (None, None) => return Err(crate::MovError::invalid("loss needs at least one branch")),
    };
    let b = g.constant(table.matrix().clone());
    let mut terms = Vec::new();
    let mut logits = [None, None];
    for (slot, (feat, w)) in [(v_m, wv), (x_m, wx)].into_iter().enumerate() {
        let Some(f) = feat else { continue };
        let l = cosine_logits_var(g, f, b, tau)?;
        logits[slot] = Some(l);
        if w > 0.0 {
            let ce = g.cross_entropy(l, labels)?;
            terms.push((ce, w));
        }
    }
    let loss = g.weighted_sum(&terms)?;
    Ok(LossVars {
        loss,
        logits_v: logits[0],
        logits_x: logits[1],
    })
}

/// Row-wise argmax of a logit matrix.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| crate::numcore::tensor::argmax(logits.row(i)))
        .collect()
}
