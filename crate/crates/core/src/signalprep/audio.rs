//! Resampling and log-mel spectrograms.

use serde::{Deserialize, Serialize};

use super::media::RawAudio;
use crate::error::{ensure_arg, MovError, Result};
use crate::numcore::fft::{hamming_window, RealFft};
use crate::numcore::Tensor;

pub const TARGET_RATE: u32 = 16_000;

/// Mono samples at a known rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Window length in samples (25 ms).
    pub win_length: usize,
    /// Hop in samples (10 ms).
    pub hop_length: usize,
    pub n_fft: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Floor applied before the logarithm.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: TARGET_RATE,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            mel_bins: 128,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

/// Channel mean followed by linear-interpolation resampling to 16 kHz.
pub fn resample_to_16k_mono(raw: &RawAudio) -> Result<Waveform> {
    ensure_arg!(raw.sample_rate > 0, "sample rate must be positive");
    ensure_arg!(!raw.channels.is_empty(), "audio has no channels");
    let n = raw.channels.iter().map(Vec::len).min().unwrap_or(0);
    let nch = raw.channels.len() as f64;
    let mono: Vec<f64> = (0..n)
        .map(|i| raw.channels.iter().map(|c| c[i]).sum::<f64>() / nch)
        .collect();
    if raw.sample_rate == TARGET_RATE || n == 0 {
        return Ok(Waveform {
            sample_rate: TARGET_RATE,
            samples: mono,
        });
    }
    let ratio = raw.sample_rate as f64 / TARGET_RATE as f64;
    let out_len = (n as u64 * TARGET_RATE as u64).div_ceil(raw.sample_rate as u64) as usize;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            if j + 1 >= n {
                mono[n - 1]
            } else {
                let f = pos - j as f64;
                mono[j] * (1.0 - f) + mono[j + 1] * f
            }
        })
        .collect();
    Ok(Waveform {
        sample_rate: TARGET_RATE,
        samples,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequency (Hz) of every mel filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.mel_bins].to_vec()
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect()
}

/// Triangular filters, `mel_bins x (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Tensor {
    let nb = cfg.n_fft / 2 + 1;
    let edges = mel_edges(cfg);
    Tensor::from_fn(&[cfg.mel_bins, nb], |idx| {
        let (m, k) = (idx / nb, idx % nb);
        let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= l || f >= r {
            0.0
        } else if f <= c {
            (f - l) / (c - l)
        } else {
            (r - f) / (r - c)
        }
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // single reflection suffices since the pad is shorter than the signal
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Log-mel spectrogram, `mel_bins x ceil(samples / hop)`.
///
/// Frame `t` is centred on sample `t * hop` with reflect padding at both ends.
pub fn log_mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<Tensor> {
    ensure_arg!(
        w.sample_rate == cfg.sample_rate,
        "waveform at {} Hz, spectrogram expects {} Hz",
        w.sample_rate,
        cfg.sample_rate
    );
    ensure_arg!(
        w.samples.len() >= cfg.win_length,
        "audio of {} samples is shorter than one {}-sample window",
        w.samples.len(),
        cfg.win_length
    );
    if cfg.n_fft < cfg.win_length || cfg.hop_length == 0 || cfg.mel_bins == 0 {
        return Err(MovError::config("invalid spectrogram geometry"));
    }
    let n = w.samples.len();
    let frames = n.div_ceil(cfg.hop_length);
    let half = (cfg.win_length / 2) as isize;
    let window = hamming_window(cfg.win_length);
    let bank = mel_filterbank(cfg);
    let nb = cfg.n_fft / 2 + 1;
    let mut fft = RealFft::new(cfg.n_fft);
    let mut frame = vec![0.0; cfg.win_length];
    let mut power = Vec::with_capacity(nb);
    let mut out = Tensor::zeros(&[cfg.mel_bins, frames]);
    for t in 0..frames {
        let start = (t * cfg.hop_length) as isize - half;
        for (j, s) in frame.iter_mut().enumerate() {
            *s = w.samples[reflect(start + j as isize, n)];
        }
        fft.power(&frame, &window, &mut power);
        for m in 0..cfg.mel_bins {
            let e: f64 = bank.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            out.data_mut()[m * frames + t] = e.max(cfg.log_floor).ln();
        }
    }
    out.ensure_finite("log_mel_spectrogram")?;
    Ok(out)
}

/// Global zero-mean, unit-variance scaling; a constant input maps to zeros.
pub fn normalize_spectrogram(s: &Tensor) -> Tensor {
    let n = s.numel() as f64;
    let mean = s.mean();
    let var = s.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Tensor::zeros(s.shape());
    }
    s.map(|x| (x - mean) / std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::fft::rfft_magnitude;
    use proptest::prelude::*;

    fn tone(freq: f64, rate: u32, secs: f64) -> Vec<f64> {
        let n = (rate as f64 * secs) as usize;
        (0..n)
            .map(|i| 0.5 * (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn ten_seconds_gives_thousand_frames() {
        let w = Waveform {
            sample_rate: 16_000,
            samples: tone(300.0, 16_000, 10.0),
        };
        let s = log_mel_spectrogram(&w, &MelConfig::default()).unwrap();
        assert_eq!(s.shape(), &[128, 1000]);
    }

    #[test]
    fn silence_is_log_floor() {
        let w = Waveform {
            sample_rate: 16_000,
            samples: vec![0.0; 16_000],
        };
        let s = log_mel_spectrogram(&w, &MelConfig::default()).unwrap();
        assert!(s.data().iter().all(|&x| x == 1e-10f64.ln()));
    }

    #[test]
    fn short_audio_rejected() {
        let w = Waveform {
            sample_rate: 16_000,
            samples: vec![0.0; 399],
        };
        assert!(log_mel_spectrogram(&w, &MelConfig::default()).is_err());
    }

    fn peak_bin(s: &Tensor) -> usize {
        let means: Vec<f64> = (0..s.rows())
            .map(|m| s.row(m).iter().sum::<f64>() / s.cols() as f64)
            .collect();
        crate::numcore::tensor::argmax(&means)
    }

    fn nearest_center(f: f64) -> usize {
        let c = mel_center_frequencies(&MelConfig::default());
        let d: Vec<f64> = c.iter().map(|x| -(x - f).abs()).collect();
        crate::numcore::tensor::argmax(&d)
    }

    #[test]
    fn tone_peaks_at_nearest_mel_centre() {
        for f in [440.0, 1000.0, 2500.0] {
            let w = Waveform {
                sample_rate: 16_000,
                samples: tone(f, 16_000, 1.0),
            };
            let s = log_mel_spectrogram(&w, &MelConfig::default()).unwrap();
            assert_eq!(peak_bin(&s), nearest_center(f), "tone {f}");
        }
    }

    #[test]
    fn resample_identity_and_halving() {
        let raw = RawAudio {
            sample_rate: 16_000,
            channels: vec![vec![0.1, 0.2, -0.3]],
        };
        assert_eq!(resample_to_16k_mono(&raw).unwrap().samples, vec![0.1, 0.2, -0.3]);
        let raw = RawAudio {
            sample_rate: 32_000,
            channels: vec![vec![0.25; 1000]],
        };
        let w = resample_to_16k_mono(&raw).unwrap();
        assert_eq!(w.samples.len(), 500);
        assert!(w.samples.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn stereo_is_averaged() {
        let raw = RawAudio {
            sample_rate: 16_000,
            channels: vec![vec![1.0, 0.0], vec![0.0, 0.5]],
        };
        assert_eq!(resample_to_16k_mono(&raw).unwrap().samples, vec![0.5, 0.25]);
    }

    #[test]
    fn resampled_tone_keeps_its_peak() {
        let raw = RawAudio {
            sample_rate: 48_000,
            channels: vec![tone(440.0, 48_000, 0.5)],
        };
        let w = resample_to_16k_mono(&raw).unwrap();
        let n = 4096;
        let frame = Tensor::from_vec(w.samples[..n].to_vec()).unwrap();
        let m = rfft_magnitude(&frame, &Tensor::from_vec(hamming_window(n)).unwrap()).unwrap();
        let bin_hz = 16_000.0 / n as f64;
        let want = (440.0 / bin_hz).round() as usize;
        assert_eq!(m.argmax(), want);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let s = Tensor::full(&[4, 5], 3.3);
        assert_eq!(normalize_spectrogram(&s).max_abs(), 0.0);
    }

    proptest! {
        #[test]
        fn normalize_moments_and_idempotence(xs in proptest::collection::vec(-50.0f64..50.0, 12..64)) {
            let n = xs.len();
            let s = Tensor::new(vec![1, n], xs).unwrap();
            let a = normalize_spectrogram(&s);
            if a.max_abs() > 0.0 {
                let mean = a.mean();
                let std = (a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                prop_assert!(mean.abs() <= 1e-9);
                prop_assert!((std - 1.0).abs() <= 1e-9);
            }
            let b = normalize_spectrogram(&a);
            prop_assert!(a.max_abs_diff(&b) <= 1e-9);
        }

        #[test]
        fn whole_seconds_give_hundred_frames_each(secs in 1usize..4) {
            let w = Waveform { sample_rate: 16_000, samples: vec![0.01; secs * 16_000] };
            let s = log_mel_spectrogram(&w, &MelConfig::default()).unwrap();
            prop_assert_eq!(s.shape(), &[128, 100 * secs]);
        }
    }
}
