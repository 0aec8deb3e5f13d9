//! Pure forward kernels shared by the graph and the public API.

use super::tensor::Tensor;
use crate::error::{ensure_arg, MovError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// A rank-1 distribution: entries in `[0, 1]` summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates `values` as a distribution (tolerance `1e-6` on the sum).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure_arg!(!values.is_empty(), "empty distribution");
        ensure_arg!(
            values.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)),
            "distribution entries must lie in [0, 1]"
        );
        let s: f64 = values.iter().sum();
        ensure_arg!((s - 1.0).abs() <= 1e-6, "distribution sums to {s}");
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable class; ties broken by the lowest index.
    pub fn argmax(&self) -> usize {
        super::tensor::argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Softmax of `logits / temperature` with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbabilityVector> {
    ensure_arg!(
        temperature > 0.0 && temperature.is_finite(),
        "temperature must be positive, got {temperature}"
    );
    ensure_arg!(!logits.is_empty(), "softmax of empty logits");
    ensure_arg!(
        logits.iter().all(|x| !x.is_nan()),
        "softmax input contains NaN"
    );
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, 1.0 / temperature);
    Ok(ProbabilityVector(out))
}

/// Tensor flavour of [`softmax`] for rank-1 inputs.
pub fn softmax_tensor(logits: &Tensor, temperature: f64) -> Result<ProbabilityVector> {
    ensure_arg!(logits.rank() == 1, "softmax expects a rank-1 tensor");
    softmax(logits.data(), temperature)
}

pub(crate) fn softmax_in_place(row: &mut [f64], inv_temp: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) * inv_temp).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log(sum(exp(row)))`, stable.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise layer normalisation over the last axis followed by an affine map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, epsilon: f64) -> Result<Tensor> {
    let d = x.cols();
    ensure_arg!(
        gain.numel() == d && bias.numel() == d,
        "layer_norm: gain/bias length {}/{} vs last axis {d}",
        gain.numel(),
        bias.numel()
    );
    ensure_arg!(epsilon >= 0.0, "layer_norm: negative epsilon");
    let mut out = x.clone();
    for i in 0..x.rows() {
        let (mean, inv_std) = row_moments(x.row(i), epsilon);
        for ((o, g), b) in out.row_mut(i).iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = (*o - mean) * inv_std * g + b;
        }
    }
    out.ensure_finite("layer_norm")?;
    Ok(out)
}

/// Mean and `1 / sqrt(var + eps)` of one row (population variance).
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    // eps == 0 on a constant row: report zero spread rather than inf
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, inv)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_arg!(a.len() == b.len(), "cosine: length {} vs {}", a.len(), b.len());
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(MovError::invalid("cosine similarity of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of `query` against every row of `table`.
pub fn cosine_logits(query: &[f64], table: &Tensor) -> Result<Vec<f64>> {
    (0..table.rows())
        .map(|i| cosine_similarity(query, table.row(i)))
        .collect()
}

/// Shannon entropy in nats, `0 * ln 0 = 0`.
pub fn entropy(p: &ProbabilityVector) -> f64 {
    -p.values()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_closed_form() {
        let p = softmax(&[1.0, 1.0, 1.0], 0.01).unwrap();
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.values()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.values()[0] - 0.73106).abs() < 1e-5);
        assert!((p.values()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
        assert!(softmax(&[f64::NAN, 1.0], 1.0).is_err());
        assert!(softmax(&[], 1.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::from_rows(&[vec![3.0; 4]]).unwrap();
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.max_abs() == 0.0);

        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        assert!(layer_norm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[2]), 0.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let x = [0.3, -2.0, 1.5];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let s = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - 0.70711).abs() < 1e-5);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn entropy_examples() {
        let u = ProbabilityVector::uniform(7);
        assert!((entropy(&u) - 7f64.ln()).abs() < 1e-12);
        let one = ProbabilityVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&one), 0.0);
    }
}
