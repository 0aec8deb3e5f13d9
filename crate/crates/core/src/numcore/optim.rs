//! AdamW with decoupled weight decay and the half-cosine schedule.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use crate::error::{ensure_arg, MovError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW update at 1-based `step`.
///
/// Decay is applied first (`w -= lr * wd * w`), then the bias-corrected Adam
/// step. Frozen parameters are never touched even when a gradient is supplied;
/// trainable parameters without a gradient are skipped.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Gradients,
    lr: f64,
    cfg: &AdamWConfig,
    step: u64,
) -> Result<()> {
    ensure_arg!(step >= 1, "adamw step counter starts at 1");
    for (name, g) in grads {
        let p = params
            .get(name)
            .map_err(|_| MovError::invalid(format!("gradient for unknown parameter `{name}`")))?;
        ensure_arg!(
            p.value.shape() == g.shape(),
            "gradient shape {:?} vs parameter `{name}` shape {:?}",
            g.shape(),
            p.value.shape()
        );
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        let w = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            w[i] -= lr * cfg.weight_decay * w[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        p.value.ensure_finite(name)?;
    }
    Ok(())
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total))`, clamped at `step = total`.
pub fn half_cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;
    use proptest::prelude::*;

    fn scalar_set(x: f64, trainable: bool) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(vec![x]).unwrap(), trainable);
        ps
    }

    fn grad(g: f64) -> Gradients {
        let mut gs = Gradients::new();
        gs.insert("w".into(), Tensor::from_vec(vec![g]).unwrap());
        gs
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut ps = scalar_set(1.5, true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut ps, &grad(0.0), 0.1, &cfg, 1).unwrap();
        assert_eq!(ps.value("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn frozen_untouched() {
        let mut ps = scalar_set(1.5, false);
        let before = ps.clone();
        for s in 1..=5 {
            adamw_step(&mut ps, &grad(3.0), 0.1, &AdamWConfig::default(), s).unwrap();
        }
        assert!(ps.values_equal_under(&before, ""));
    }

    #[test]
    fn three_step_hand_trace() {
        // lr 0.1, wd 0.05, betas (0.9, 0.999), eps 1e-8, w0 = 1, g = 0.5, -1.0, 2.0
        let cfg = AdamWConfig::default();
        let mut ps = scalar_set(1.0, true);
        let gs = [0.5, -1.0, 2.0];
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in gs.iter().enumerate() {
            let t = t as i32 + 1;
            w *= 1.0 - 0.1 * 0.05;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        for (t, g) in gs.iter().enumerate() {
            adamw_step(&mut ps, &grad(*g), 0.1, &cfg, t as u64 + 1).unwrap();
        }
        let got = ps.value("w").unwrap().data()[0];
        assert!((got - w).abs() <= 1e-10, "{got} vs {w}");
        // first step moves by exactly lr (|m_hat / sqrt(v_hat)| = 1) after decay
        let mut ps = scalar_set(1.0, true);
        adamw_step(&mut ps, &grad(0.5), 0.1, &cfg, 1).unwrap();
        let w1 = ps.value("w").unwrap().data()[0];
        assert!((w1 - (0.995 - 0.1)).abs() < 1e-7);
    }

    #[test]
    fn unknown_or_misshaped_gradient_rejected() {
        let mut ps = scalar_set(1.0, true);
        let mut gs = Gradients::new();
        gs.insert("nope".into(), Tensor::from_vec(vec![1.0]).unwrap());
        assert!(adamw_step(&mut ps, &gs, 0.1, &AdamWConfig::default(), 1).is_err());
        let mut gs = Gradients::new();
        gs.insert("w".into(), Tensor::zeros(&[2]));
        assert!(adamw_step(&mut ps, &gs, 0.1, &AdamWConfig::default(), 1).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(half_cosine_lr(1e-4, 0, 100), 1e-4);
        assert!(half_cosine_lr(1e-4, 100, 100).abs() < 1e-20);
        assert!((half_cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-18);
        assert!(half_cosine_lr(1e-4, 150, 100).abs() < 1e-20);
    }

    proptest! {
        #[test]
        fn schedule_nonincreasing(total in 1u64..500, base in 1e-6f64..1.0) {
            let mut prev = f64::INFINITY;
            for s in 0..=total + 2 {
                let lr = half_cosine_lr(base, s, total);
                prop_assert!(lr <= prev + 1e-18);
                prev = lr;
            }
        }
    }
}
