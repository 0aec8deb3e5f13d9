//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamSet};
use crate::error::Result;

/// Coordinates sampled per parameter tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|analytic - numeric| / max(1, |numeric|)` over sampled coordinates.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tensors_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }
}

/// Compares analytic gradients with central differences.
///
/// `scalar_fn` evaluates the loss for a parameter set; `grad_fn` returns the
/// analytic gradients of the same loss. Only trainable parameters are checked;
/// a parameter absent from the analytic gradients counts as zero gradient.
/// A non-finite gradient on either side reports an infinite error.
pub fn grad_check(
    scalar_fn: impl Fn(&ParamSet) -> Result<f64>,
    grad_fn: impl Fn(&ParamSet) -> Result<Gradients>,
    params: &ParamSet,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = grad_fn(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        tensors_checked: 0,
    };
    for name in params.trainable_names() {
        let n = params.value(&name)?.numel();
        let coords: Vec<usize> = if n <= MAX_COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, MAX_COORDS_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        report.tensors_checked += 1;
        for i in coords {
            let orig = params.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + epsilon;
            let plus = scalar_fn(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - epsilon;
            let minus = scalar_fn(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let err = if a.is_finite() && numeric.is_finite() {
                (a - numeric).abs() / numeric.abs().max(1.0)
            } else {
                f64::INFINITY
            };
            report.coords_checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
