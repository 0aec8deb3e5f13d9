//! Real-input FFT helpers on top of `rustfft`.

use rustfft::{num_complex::Complex, FftPlanner};

use super::tensor::Tensor;
use crate::error::{ensure_arg, Result};

/// Symmetric Hamming window of length `n` (`0.54 - 0.46 cos(2 pi i / (n - 1))`).
pub fn hamming_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Reusable planner for repeated transforms of one size.
pub struct RealFft {
    n: usize,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    buf: Vec<Complex<f64>>,
}

impl RealFft {
    /// `n` is rounded up to the next power of two.
    pub fn new(n: usize) -> Self {
        let n = n.max(1).next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Self {
            n,
            fft,
            buf: vec![Complex::new(0.0, 0.0); n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Power spectrum `|X_k|^2`, `k = 0..=n/2`, of the windowed, zero-padded frame.
    pub fn power(&mut self, frame: &[f64], window: &[f64], out: &mut Vec<f64>) {
        self.transform(frame, window);
        out.clear();
        out.extend(self.buf[..=self.n / 2].iter().map(|c| c.norm_sqr()));
    }

    fn transform(&mut self, frame: &[f64], window: &[f64]) {
        for (i, c) in self.buf.iter_mut().enumerate() {
            let x = if i < frame.len() { frame[i] * window[i] } else { 0.0 };
            *c = Complex::new(x, 0.0);
        }
        self.fft.process(&mut self.buf);
    }
}

fn check(frame: &Tensor, window: &Tensor) -> Result<()> {
    ensure_arg!(frame.rank() == 1, "fft frame must be rank 1");
    ensure_arg!(frame.numel() > 0, "fft of an empty frame");
    ensure_arg!(
        window.numel() == frame.numel(),
        "window length {} vs frame length {}",
        window.numel(),
        frame.numel()
    );
    Ok(())
}

/// Magnitude spectrum `|X_k|` of the windowed frame, zero-padded to the next
/// power of two; length `n/2 + 1` of the padded size.
pub fn rfft_magnitude(frame: &Tensor, window: &Tensor) -> Result<Tensor> {
    let p = rfft_power(frame, window)?;
    Ok(p.map(f64::sqrt))
}

/// Power spectrum `|X_k|^2`, same layout as [`rfft_magnitude`].
pub fn rfft_power(frame: &Tensor, window: &Tensor) -> Result<Tensor> {
    check(frame, window)?;
    let mut fft = RealFft::new(frame.numel());
    let mut out = Vec::new();
    fft.power(frame.data(), window.data(), &mut out);
    Tensor::from_vec(out)
}
