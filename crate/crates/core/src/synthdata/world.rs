//! Procedural classes: a textured sprite drifting over a noise background,
//! with a harmonic tone whose pitch follows the motion direction.
//!
//! The first half of the classes come in pairs that share colour and shape
//! and differ only in motion and pitch, so a single frame cannot tell the
//! members of a pair apart.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::signalprep::Image;

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [220.0, 40.0, 40.0]),
    ("green", [40.0, 200.0, 60.0]),
    ("blue", [50.0, 80.0, 230.0]),
    ("yellow", [230.0, 210.0, 40.0]),
    ("magenta", [210.0, 50.0, 200.0]),
    ("cyan", [40.0, 200.0, 210.0]),
    ("orange", [240.0, 140.0, 30.0]),
    ("white", [235.0, 235.0, 235.0]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Disk,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disk, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disk => "disk",
            Shape::Cross => "cross",
        }
    }

    /// Coverage in `[0, 1]` at offset `(dx, dy)` from the centre, for a
    /// sprite of half-size `r`, with a one-pixel soft edge.
    fn coverage(self, dx: f64, dy: f64, r: f64) -> f64 {
        // signed distance, negative inside
        let sd = match self {
            Shape::Square => dx.abs().max(dy.abs()) - r,
            Shape::Disk => (dx * dx + dy * dy).sqrt() - r,
            Shape::Cross => {
                let arm = r * 0.38;
                let a = dx.abs().max(dy.abs()) - r;
                let b = dx.abs().min(dy.abs()) - arm;
                a.max(b)
            }
        };
        (0.5 - sd).clamp(0.0, 1.0)
    }
}

pub const MOTION_WORDS: [&str; 8] = [
    "eastward",
    "northeastward",
    "northward",
    "northwestward",
    "westward",
    "southwestward",
    "southward",
    "southeastward",
];

pub const PITCH_WORDS: [&str; 8] = ["low", "deep", "mellow", "warm", "clear", "bright", "high", "shrill"];

/// Generator settings for the whole world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub frames: usize,
    pub frame_hw: usize,
    pub sprite_size: f64,
    /// Sprite speed in pixels per frame.
    pub speed: f64,
    pub sample_rate: u32,
    pub audio_seconds: f64,
    /// Standard deviation of per-frame pixel noise (0..255 scale).
    pub pixel_noise: f64,
    pub audio_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            frame_hw: 40,
            sprite_size: 14.0,
            speed: 1.5,
            sample_rate: 16_000,
            audio_seconds: 2.0,
            pixel_noise: 3.0,
            audio_noise: 0.02,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.frames >= 2, "need at least two frames");
        ensure_arg!(
            self.sprite_size >= 4.0 && self.sprite_size < self.frame_hw as f64,
            "sprite must fit inside the frame"
        );
        ensure_arg!(self.speed > 0.0 && self.speed <= 20.0, "speed must lie in (0, 20]");
        let travel = self.speed * (self.frames - 1) as f64;
        ensure_arg!(
            travel + self.sprite_size <= self.frame_hw as f64,
            "sprite would leave the frame: travel {travel} px"
        );
        ensure_arg!(self.sample_rate >= 8_000 && self.audio_seconds > 0.0, "bad audio settings");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClassSpec {
    pub name: String,
    pub color: usize,
    pub shape: Shape,
    /// Index of the motion direction, multiples of 45 degrees counterclockwise from east.
    pub direction: usize,
    /// Velocity in pixels per frame, `+y` pointing down.
    pub velocity: (f64, f64),
    pub fundamental_hz: f64,
    pub harmonics: Vec<f64>,
    pub appearance: usize,
}

/// Fundamental frequency tied to motion direction `d`.
pub fn fundamental_for(direction: usize) -> f64 {
    220.0 * 2f64.powf(direction as f64 * 0.5)
}

/// Appearance index of class `c` among `n`: the first `2 * (n / 4)` classes
/// share appearance in consecutive pairs.
pub fn appearance_of(c: usize, n: usize) -> usize {
    let paired = 2 * (n / 4);
    if c < paired {
        c / 2
    } else {
        paired / 2 + (c - paired)
    }
}

/// Largest class count with unique colour-shape combinations.
pub const MAX_CLASSES: usize = 32;

/// The `n` class specifications of the world at `speed`.
pub fn class_specs(n: usize, speed: f64) -> Result<Vec<SynthClassSpec>> {
    ensure_arg!(n >= 4, "need at least 4 classes, got {n}");
    ensure_arg!(n <= MAX_CLASSES, "at most {MAX_CLASSES} classes supported, got {n}");
    Ok((0..n)
        .map(|c| {
            let a = appearance_of(c, n);
            let color = a % COLORS.len();
            let shape = Shape::ALL[a % Shape::ALL.len()];
            let direction = c % 8;
            let theta = direction as f64 * PI / 4.0;
            SynthClassSpec {
                name: format!(
                    "{} {} {} {}",
                    COLORS[color].0,
                    shape.word(),
                    MOTION_WORDS[direction],
                    PITCH_WORDS[direction]
                ),
                color,
                shape,
                direction,
                velocity: (speed * theta.cos(), -speed * theta.sin()),
                fundamental_hz: fundamental_for(direction),
                harmonics: vec![1.0, 0.5, 0.25],
                appearance: a,
            }
        })
        .collect())
}

/// Rendered clip with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedClip {
    pub frames: Vec<Image>,
    pub audio: Vec<f64>,
    /// Sprite centre per frame.
    pub centers: Vec<(f64, f64)>,
}

fn noise_background(hw: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // coarse value noise so the background has texture for flow
    let cell = 4usize;
    let g = hw / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(60.0..140.0)).collect();
    let mut out = vec![0.0; hw * hw];
    for y in 0..hw {
        for x in 0..hw {
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            out[y * hw + x] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1))
                + rng.random_range(-12.0..12.0);
        }
    }
    out
}

/// Draws one frame with the sprite centred at `(cx, cy)`.
pub fn render_frame(
    spec: &SynthClassSpec,
    background: &[f64],
    hw: usize,
    size: f64,
    (cx, cy): (f64, f64),
    noise: &mut dyn FnMut() -> f64,
) -> Image {
    let mut img = Image::filled(hw, hw, 3, 0);
    let r = size / 2.0;
    let color = COLORS[spec.color].1;
    for y in 0..hw {
        for x in 0..hw {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let cov = spec.shape.coverage(dx, dy, r);
            // 2-D pattern fixed to the sprite, coarse enough that a 3 px shift does not alias
            let tex = 0.75 + 0.25 * (0.5 * dx).sin() * (0.5 * dy).cos();
            let bg = background[y * hw + x];
            let n = noise();
            let px = img.pixel_mut(y, x);
            for ch in 0..3 {
                let v = cov * color[ch] * tex + (1.0 - cov) * bg + n;
                px[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

/// Harmonic tone with random phases and additive Gaussian noise.
pub fn synth_tone(spec: &SynthClassSpec, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (cfg.audio_seconds * cfg.sample_rate as f64).round() as usize;
    let phases: Vec<f64> = spec.harmonics.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let noise = Normal::new(0.0, cfg.audio_noise.max(0.0)).expect("finite std");
    let sr = cfg.sample_rate as f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = spec
                .harmonics
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| {
                    let f = spec.fundamental_hz * (h + 1) as f64;
                    if f < sr / 2.0 {
                        a * (2.0 * PI * f * t + p).sin()
                    } else {
                        0.0
                    }
                })
                .sum();
            (0.3 * tone + noise.sample(rng)).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Renders a clip of class `spec`; a pure function of `seed`.
pub fn render_clip(spec: &SynthClassSpec, cfg: &WorldConfig, seed: u64) -> Result<RenderedClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = cfg.frame_hw;
    let r = cfg.sprite_size / 2.0;
    let steps = (cfg.frames - 1) as f64;
    let (vx, vy) = spec.velocity;
    // start so that the whole trajectory stays inside the frame
    let range = |v: f64| {
        let lo = r + (-v * steps).max(0.0);
        let hi = hw as f64 - r - (v * steps).max(0.0);
        (lo, hi.max(lo))
    };
    let (xl, xh) = range(vx);
    let (yl, yh) = range(vy);
    let cx0 = if xh > xl { rng.random_range(xl..=xh) } else { xl };
    let cy0 = if yh > yl { rng.random_range(yl..=yh) } else { yl };
    let background = noise_background(hw, &mut rng);
    let pixel_noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("finite std");
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut centers = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let c = (cx0 + vx * t as f64, cy0 + vy * t as f64);
        let mut noise = || pixel_noise.sample(&mut rng);
        frames.push(render_frame(spec, &background, hw, cfg.sprite_size, c, &mut noise));
        centers.push(c);
    }
    let audio = synth_tone(spec, cfg, &mut rng);
    Ok(RenderedClip {
        frames,
        audio,
        centers,
    })
}

/// A still of `spec`'s appearance at a random position, for image-text pretraining.
pub fn render_still(spec: &SynthClassSpec, cfg: &WorldConfig, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = cfg.frame_hw;
    let r = cfg.sprite_size / 2.0;
    let c = (
        rng.random_range(r..hw as f64 - r),
        rng.random_range(r..hw as f64 - r),
    );
    let background = noise_background(hw, &mut rng);
    let pixel_noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("finite std");
    let mut noise = || pixel_noise.sample(&mut rng);
    render_frame(spec, &background, hw, cfg.sprite_size, c, &mut noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn names_unique_and_pairs_share_appearance() {
        for n in [4, 5, 16, 31, MAX_CLASSES] {
            let specs = class_specs(n, 1.5).unwrap();
            let names: BTreeSet<_> = specs.iter().map(|s| s.name.clone()).collect();
            assert_eq!(names.len(), n);
        }
        let s = class_specs(16, 1.5).unwrap();
        for k in 0..4 {
            assert_eq!(s[2 * k].appearance, s[2 * k + 1].appearance);
            assert_ne!(s[2 * k].direction, s[2 * k + 1].direction);
        }
        let singles: BTreeSet<_> = s[8..].iter().map(|c| c.appearance).collect();
        assert_eq!(singles.len(), 8);
        assert!(s[..8].iter().all(|c| !singles.contains(&c.appearance)));
        assert!(class_specs(3, 1.5).is_err() && class_specs(MAX_CLASSES + 1, 1.5).is_err());
    }

    #[test]
    fn invariants_hold() {
        for s in class_specs(16, 1.5).unwrap() {
            let (vx, vy) = s.velocity;
            assert!((vx * vx + vy * vy).sqrt() <= 20.0);
            assert!(s.harmonics.len() as f64 * s.fundamental_hz < 8_000.0);
        }
    }

    #[test]
    fn clip_is_deterministic_and_moves() {
        let spec = &class_specs(16, 1.5).unwrap()[0];
        let cfg = WorldConfig::default();
        let a = render_clip(spec, &cfg, 5).unwrap();
        assert_eq!(a, render_clip(spec, &cfg, 5).unwrap());
        assert_ne!(a.frames[0], render_clip(spec, &cfg, 6).unwrap().frames[0]);
        let (x0, _) = a.centers[0];
        let (x1, _) = a.centers[15];
        assert!((x1 - x0 - 22.5).abs() < 1e-9);
        assert_eq!(a.audio.len(), 32_000);
        for &(x, y) in &a.centers {
            assert!(x >= 7.0 && x <= 33.0 && y >= 7.0 && y <= 33.0);
        }
    }
}
