//! Seeded crops, SpecAugment masking and clip sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub crop_frames: usize,
    pub max_time_mask: usize,
    pub max_freq_mask: usize,
}

impl SpecAugmentConfig {
    /// Full-length clips: 800-frame crop, time mask up to 192, freq mask up to 48.
    pub const FULL: SpecAugmentConfig = SpecAugmentConfig {
        crop_frames: 800,
        max_time_mask: 192,
        max_freq_mask: 48,
    };
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self::FULL
    }
}

/// Offsets and mask bands drawn for one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugmentDraw {
    pub crop_offset: usize,
    pub time_mask: (usize, usize),
    pub freq_mask: (usize, usize),
}

/// Random time crop then one time band and one frequency band zeroed.
pub fn crop_and_augment_spectrogram(s: &Tensor, cfg: &SpecAugmentConfig, seed: u64) -> Result<Tensor> {
    Ok(crop_and_augment_with_draw(s, cfg, seed)?.0)
}

pub fn crop_and_augment_with_draw(
    s: &Tensor,
    cfg: &SpecAugmentConfig,
    seed: u64,
) -> Result<(Tensor, SpecAugmentDraw)> {
    let (bins, frames) = s.expect_matrix("spectrogram")?;
    ensure_arg!(
        frames >= cfg.crop_frames && cfg.crop_frames > 0,
        "spectrogram has {frames} frames, crop needs {}",
        cfg.crop_frames
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop_offset = rng.random_range(0..=frames - cfg.crop_frames);
    let tw = rng.random_range(0..=cfg.max_time_mask.min(cfg.crop_frames));
    let t0 = rng.random_range(0..=cfg.crop_frames - tw);
    let fw = rng.random_range(0..=cfg.max_freq_mask.min(bins));
    let f0 = rng.random_range(0..=bins - fw);
    let out = crop_time(s, crop_offset, cfg.crop_frames)?;
    let out = apply_masks(out, (t0, tw), (f0, fw));
    Ok((
        out,
        SpecAugmentDraw {
            crop_offset,
            time_mask: (t0, tw),
            freq_mask: (f0, fw),
        },
    ))
}

/// Contiguous frames `[offset, offset + len)` of every bin.
pub fn crop_time(s: &Tensor, offset: usize, len: usize) -> Result<Tensor> {
    let (bins, frames) = s.expect_matrix("spectrogram")?;
    ensure_arg!(offset + len <= frames && len > 0, "time crop outside spectrogram");
    let mut data = Vec::with_capacity(bins * len);
    for b in 0..bins {
        data.extend_from_slice(&s.row(b)[offset..offset + len]);
    }
    Tensor::new(vec![bins, len], data)
}

fn apply_masks(mut s: Tensor, time: (usize, usize), freq: (usize, usize)) -> Tensor {
    let frames = s.cols();
    for b in 0..s.rows() {
        let row = s.row_mut(b);
        if b >= freq.0 && b < freq.0 + freq.1 {
            row.iter_mut().for_each(|x| *x = 0.0);
        } else {
            row[time.0..time.0 + time.1].iter_mut().for_each(|x| *x = 0.0);
        }
        debug_assert_eq!(row.len(), frames);
    }
    s
}

/// Duplicates a `bins x frames` spectrogram into `3 x bins x frames`.
pub fn expand_three_channels(s: &Tensor) -> Result<Tensor> {
    let (b, f) = s.expect_matrix("spectrogram")?;
    let mut data = Vec::with_capacity(3 * s.numel());
    for _ in 0..3 {
        data.extend_from_slice(s.data());
    }
    Tensor::new(vec![3, b, f], data)
}

/// `start + k * stride` for `k < n`, clamped to the last frame.
pub fn frame_indices(start: usize, video_len: usize, n: usize, stride: usize) -> Result<Vec<usize>> {
    ensure_arg!(video_len > 0, "empty video");
    Ok((0..n).map(|k| (start + k * stride).min(video_len - 1)).collect())
}

/// Temporal indices plus one spatial crop shared by every sampled frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipSample {
    pub indices: Vec<usize>,
    pub crop_y: usize,
    pub crop_x: usize,
}

/// Random start in `[0, max(0, len - span)]` where `span = (n - 1) * stride + 1`,
/// and a random `crop_hw` window inside `frame_hw`.
pub fn sample_frames(
    video_len: usize,
    n: usize,
    stride: usize,
    frame_hw: (usize, usize),
    crop_hw: (usize, usize),
    seed: u64,
) -> Result<ClipSample> {
    ensure_arg!(video_len > 0, "empty video");
    ensure_arg!(n > 0, "must sample at least one frame");
    ensure_arg!(
        crop_hw.0 <= frame_hw.0 && crop_hw.1 <= frame_hw.1,
        "crop {crop_hw:?} larger than frame {frame_hw:?}"
    );
    let span = (n - 1) * stride + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=video_len.saturating_sub(span));
    let crop_y = rng.random_range(0..=frame_hw.0 - crop_hw.0);
    let crop_x = rng.random_range(0..=frame_hw.1 - crop_hw.1);
    Ok(ClipSample {
        indices: frame_indices(start, video_len, n, stride)?,
        crop_y,
        crop_x,
    })
}

/// Evenly spaced clip starts for multi-view testing (`views` >= 1).
pub fn view_starts(video_len: usize, n: usize, stride: usize, views: usize) -> Vec<usize> {
    let span = (n - 1) * stride + 1;
    let room = video_len.saturating_sub(span);
    if views <= 1 {
        return vec![room / 2];
    }
    (0..views).map(|i| (room * i + (views - 1) / 2) / (views - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(bins: usize, frames: usize) -> Tensor {
        Tensor::from_fn(&[bins, frames], |i| 1.0 + i as f64)
    }

    #[test]
    fn crop_shape_and_mask_semantics() {
        let s = ramp(128, 1000);
        for seed in 0..20 {
            let (out, d) = crop_and_augment_with_draw(&s, &SpecAugmentConfig::FULL, seed).unwrap();
            assert_eq!(out.shape(), &[128, 800]);
            assert!(d.time_mask.1 <= 192 && d.freq_mask.1 <= 48);
            for b in 0..128 {
                for t in 0..800 {
                    let masked = (b >= d.freq_mask.0 && b < d.freq_mask.0 + d.freq_mask.1)
                        || (t >= d.time_mask.0 && t < d.time_mask.0 + d.time_mask.1);
                    let v = out.at2(b, t);
                    if masked {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, s.at2(b, t + d.crop_offset));
                    }
                }
            }
        }
    }

    #[test]
    fn seeds_control_crop() {
        let s = ramp(8, 1200);
        let a = crop_and_augment_spectrogram(&s, &SpecAugmentConfig::FULL, 5).unwrap();
        let b = crop_and_augment_spectrogram(&s, &SpecAugmentConfig::FULL, 5).unwrap();
        assert_eq!(a, b);
        let offsets: std::collections::BTreeSet<usize> = (0..100)
            .map(|seed| crop_and_augment_with_draw(&s, &SpecAugmentConfig::FULL, seed).unwrap().1.crop_offset)
            .collect();
        assert!(offsets.len() > 1);
    }

    #[test]
    fn too_short_rejected() {
        assert!(crop_and_augment_spectrogram(&ramp(4, 799), &SpecAugmentConfig::FULL, 0).is_err());
    }

    #[test]
    fn three_channels() {
        let s = ramp(128, 800);
        let e = expand_three_channels(&s).unwrap();
        assert_eq!(e.shape(), &[3, 128, 800]);
        let n = s.numel();
        assert_eq!(&e.data()[..n], &e.data()[n..2 * n]);
        assert_eq!(&e.data()[n..2 * n], &e.data()[2 * n..]);
        let sum: Vec<f64> = (0..n).map(|i| e.data()[i] + e.data()[n + i] + e.data()[2 * n + i]).collect();
        assert!(sum.iter().zip(s.data()).all(|(a, b)| *a == 3.0 * b));
    }

    #[test]
    fn index_examples() {
        let idx = frame_indices(0, 100, 16, 4).unwrap();
        assert_eq!(idx, (0..16).map(|k| 4 * k).collect::<Vec<_>>());
        let idx = frame_indices(0, 10, 16, 4).unwrap();
        assert_eq!(idx[..3], [0, 4, 8]);
        assert!(idx[3..].iter().all(|&i| i == 9));
        assert!(frame_indices(0, 0, 4, 1).is_err());
    }

    #[test]
    fn view_starts_spread() {
        assert_eq!(view_starts(16, 4, 2, 1), vec![4]);
        assert_eq!(view_starts(16, 4, 2, 2), vec![0, 9]);
        assert_eq!(view_starts(5, 4, 2, 3), vec![0, 0, 0]);
    }

    proptest! {
        #[test]
        fn sampling_is_seeded(seed in any::<u64>(), len in 1usize..200) {
            let a = sample_frames(len, 16, 4, (40, 40), (32, 32), seed).unwrap();
            let b = sample_frames(len, 16, 4, (40, 40), (32, 32), seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.indices.iter().all(|&i| i < len));
            prop_assert!(a.crop_y <= 8 && a.crop_x <= 8);
        }
    }
}
