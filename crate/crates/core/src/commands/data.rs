//! Preprocessing caches and the samplers that feed training and evaluation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::PromptSet;
use crate::error::{ensure_arg, MovError, Result};
use crate::evaluator::{InferenceConfig, ViewSource};
use crate::fusion::{AuxInput, AuxModality, ClipInput};
use crate::numcore::io::{read_tensor, write_tensor};
use crate::numcore::Tensor;
use crate::signalprep::augment::{crop_time, view_starts};
use crate::signalprep::media::{read_ppm, read_wav, write_ppm};
use crate::signalprep::flow::FLOW_BOUND;
use crate::signalprep::{
    crop_and_augment_spectrogram, estimate_flow, expand_three_channels, flow_to_image, frame_indices,
    log_mel_spectrogram, normalize_spectrogram, resample_to_16k_mono, sample_frames, Image, MelConfig,
    SpecAugmentConfig, TvL1Config, Waveform,
};
use crate::synthdata::manifest::frame_file;
use crate::synthdata::world::{render_clip, render_still, synth_tone, Shape, COLORS, MOTION_WORDS, PITCH_WORDS};
use crate::synthdata::{DatasetManifest, ManifestRecord, Split, SynthClassSpec, WorldConfig};
use crate::trainer::{CaptionSampler, ClipSampler};

/// How clips are cut from cached samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub frames_per_clip: usize,
    pub stride: usize,
    pub crop_hw: usize,
    pub spec_augment: SpecAugmentConfig,
    pub mel: MelConfig,
    pub flow: TvL1Config,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames_per_clip: 4,
            stride: 2,
            crop_hw: 32,
            spec_augment: SpecAugmentConfig {
                crop_frames: 64,
                max_time_mask: 16,
                max_freq_mask: 48,
            },
            mel: MelConfig::default(),
            flow: TvL1Config::default(),
        }
    }
}

pub fn flow_file(t: usize) -> String {
    format!("flow_{t:03}.ppm")
}

pub const SPEC_FILE: &str = "spec.movt";

/// Flow between frame `t` and frame `min(t + stride, len - 1)`.
pub fn flow_partner(t: usize, stride: usize, len: usize) -> usize {
    (t + stride).min(len - 1)
}

/// Writes flow images and the log-mel spectrogram next to each sample.
pub fn preprocess(manifest: &DatasetManifest, root: &Path, cfg: &DataConfig) -> Result<()> {
    manifest
        .records
        .par_iter()
        .map(|r| preprocess_record(r, root, cfg))
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn preprocess_record(r: &ManifestRecord, root: &Path, cfg: &DataConfig) -> Result<()> {
    let dir = root.join(&r.frames_dir);
    let frames = (0..r.num_frames)
        .map(|t| read_ppm(&dir.join(frame_file(t))))
        .collect::<Result<Vec<_>>>()?;
    for t in 0..frames.len() {
        let next = flow_partner(t, cfg.stride, frames.len());
        let flow = estimate_flow(&frames[t], &frames[next], &cfg.flow)?;
        write_ppm(&dir.join(flow_file(t)), &flow_to_image(&flow))?;
    }
    let wav = resample_to_16k_mono(&read_wav(&root.join(&r.audio))?)?;
    write_tensor(&dir.join(SPEC_FILE), &log_mel_spectrogram(&wav, &cfg.mel)?)
}

/// Pixel values to `(x / 255 - 0.5) / 0.25`, as a `3 x h x w` tensor of a crop.
pub fn image_tensor(img: &Image, y0: usize, x0: usize, size: usize) -> Result<Tensor> {
    ensure_arg!(img.channels == 3, "expected an RGB image");
    let c = img.crop(y0, x0, size, size)?;
    Ok(Tensor::from_fn(&[3, size, size], |i| {
        let ch = i / (size * size);
        let p = i % (size * size);
        (c.data[p * 3 + ch] as f64 / 255.0 - 0.5) / 0.25
    }))
}

/// A crop of a quantised flow image decoded back to pixels of displacement:
/// `u` and `v` in the first two channels, zeros in the third.
pub fn flow_tensor(img: &Image, y0: usize, x0: usize, size: usize) -> Result<Tensor> {
    ensure_arg!(img.channels == 3, "expected a three-channel flow image");
    let c = img.crop(y0, x0, size, size)?;
    let step = 2.0 * FLOW_BOUND / 255.0;
    Ok(Tensor::from_fn(&[3, size, size], |i| {
        let ch = i / (size * size);
        let p = i % (size * size);
        if ch == 2 {
            0.0
        } else {
            c.data[p * 3 + ch] as f64 * step - FLOW_BOUND
        }
    }))
}

/// Everything one sample contributes, decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub label: usize,
    pub frames: Vec<Image>,
    pub flows: Vec<Image>,
    /// Normalised log-mel spectrogram.
    pub spec: Option<Tensor>,
}

/// Decodes the records of `split` with the caches `modality` needs.
pub fn load_split(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    modality: AuxModality,
) -> Result<Vec<LoadedSample>> {
    let recs: Vec<&ManifestRecord> = manifest.records_in(split).collect();
    recs.par_iter()
        .map(|r| {
            let dir = root.join(&r.frames_dir);
            let frames = (0..r.num_frames)
                .map(|t| read_ppm(&dir.join(frame_file(t))))
                .collect::<Result<Vec<_>>>()?;
            let missing = |p: PathBuf| {
                MovError::validation(format!("missing cache {}; run preprocess first", p.display()))
            };
            let (flows, spec) = match modality {
                AuxModality::Flow => {
                    let flows = (0..r.num_frames)
                        .map(|t| {
                            let p = dir.join(flow_file(t));
                            if !p.is_file() {
                                return Err(missing(p));
                            }
                            read_ppm(&p)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (flows, None)
                }
                AuxModality::Audio => {
                    let p = dir.join(SPEC_FILE);
                    if !p.is_file() {
                        return Err(missing(p));
                    }
                    (Vec::new(), Some(normalize_spectrogram(&read_tensor(&p)?)))
                }
            };
            Ok(LoadedSample {
                id: r.id.clone(),
                label: manifest.label_of(r)?,
                frames,
                flows,
                spec,
            })
        })
        .collect()
}

fn clip_at(
    s: &LoadedSample,
    modality: AuxModality,
    indices: &[usize],
    y0: usize,
    x0: usize,
    crop: usize,
    spec: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<ClipInput> {
    let frames = indices
        .iter()
        .map(|&t| image_tensor(&s.frames[t], y0, x0, crop))
        .collect::<Result<Vec<_>>>()?;
    let aux = match modality {
        AuxModality::Flow => AuxInput::Flow(
            indices
                .iter()
                .map(|&t| flow_tensor(&s.flows[t], y0, x0, crop))
                .collect::<Result<Vec<_>>>()?,
        ),
        AuxModality::Audio => {
            let full = s.spec.as_ref().ok_or_else(|| MovError::invalid("sample lacks a spectrogram"))?;
            AuxInput::Audio(expand_three_channels(&spec(full)?)?)
        }
    };
    Ok(ClipInput { frames, aux })
}

/// Randomly cropped, SpecAugmented training clips.
pub struct TrainClips<'a> {
    pub samples: &'a [LoadedSample],
    pub modality: AuxModality,
    pub cfg: &'a DataConfig,
}

impl ClipSampler for TrainClips<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    fn sample(&self, i: usize, seed: u64) -> Result<ClipInput> {
        let s = &self.samples[i];
        let f = &s.frames[0];
        let draw = sample_frames(
            s.frames.len(),
            self.cfg.frames_per_clip,
            self.cfg.stride,
            (f.height, f.width),
            (self.cfg.crop_hw, self.cfg.crop_hw),
            seed,
        )?;
        let aug = &self.cfg.spec_augment;
        clip_at(s, self.modality, &draw.indices, draw.crop_y, draw.crop_x, self.cfg.crop_hw, |t| {
            crop_and_augment_spectrogram(t, aug, seed ^ 0x5a5a)
        })
    }
}

/// Deterministic multi-view test clips.
///
/// Video views are temporal starts times spatial crops along the diagonal;
/// audio views are evenly spaced unmasked crops. The view count is the
/// larger of the two, and the shorter list is cycled.
pub struct TestViews<'a> {
    pub samples: &'a [LoadedSample],
    pub modality: AuxModality,
    pub cfg: &'a DataConfig,
    pub inference: &'a InferenceConfig,
}

/// Offsets of `k` crops of `crop` along `[0, full - crop]`, centre when `k = 1`.
pub fn spatial_offsets(full: usize, crop: usize, k: usize) -> Vec<usize> {
    let room = full.saturating_sub(crop);
    if k <= 1 {
        return vec![room / 2];
    }
    (0..k).map(|i| room * i / (k - 1)).collect()
}

impl ViewSource for TestViews<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    fn views(&self, i: usize) -> Result<Vec<ClipInput>> {
        let s = &self.samples[i];
        let (n, stride, crop) = (self.cfg.frames_per_clip, self.cfg.stride, self.cfg.crop_hw);
        let vv = self.inference.views_video;
        let f = &s.frames[0];
        let mut video = Vec::new();
        for start in view_starts(s.frames.len(), n, stride, vv.temporal) {
            let idx = frame_indices(start, s.frames.len(), n, stride)?;
            for (&y, &x) in spatial_offsets(f.height, crop, vv.spatial)
                .iter()
                .zip(&spatial_offsets(f.width, crop, vv.spatial))
            {
                video.push((idx.clone(), y, x));
            }
        }
        let count = match self.modality {
            AuxModality::Flow => video.len(),
            AuxModality::Audio => video.len().max(self.inference.views_audio),
        };
        let audio_len = self.cfg.spec_augment.crop_frames;
        (0..count)
            .map(|k| {
                let (idx, y, x) = &video[k % video.len()];
                let spec = |t: &Tensor| {
                    let frames = t.cols();
                    ensure_arg!(frames >= audio_len, "spectrogram shorter than the audio crop");
                    let room = frames - audio_len;
                    let a = self.inference.views_audio;
                    let off = if a <= 1 { room / 2 } else { room * (k % a) / (a - 1) };
                    crop_time(t, off, audio_len)
                };
                clip_at(s, self.modality, idx, *y, *x, crop, spec)
            })
            .collect()
    }
}

/// What a pretraining pair depicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    /// RGB still; colour and shape are visible.
    Still,
    /// Quantised flow image of the moving sprite; the motion is visible.
    Flow,
    /// Log-mel spectrogram crop; the pitch is visible.
    Spectrogram,
}

/// Image-caption pairs for backbone pretraining.
///
/// Even pairs are RGB stills, odd pairs depict the auxiliary modality. Every
/// caption names colour, shape, motion and pitch in class-name order; words
/// for attributes the picture does not show are drawn at random, so the text
/// encoder must keep each attribute recoverable from a full name.
pub struct PretrainCorpus<'a> {
    pub specs: &'a [SynthClassSpec],
    pub world: &'a WorldConfig,
    pub data: &'a DataConfig,
    pub aux: AuxModality,
    pub prompts: &'a PromptSet,
    pub size: usize,
    pub seed: u64,
}

impl PretrainCorpus<'_> {
    fn flow_image(&self, spec: &SynthClassSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
        let world = WorldConfig {
            frames: self.data.stride + 1,
            ..self.world.clone()
        };
        let clip = render_clip(spec, &world, rng.random())?;
        let flow = estimate_flow(&clip.frames[0], &clip.frames[self.data.stride], &self.data.flow)?;
        Ok(flow_to_image(&flow))
    }

    fn spectrogram(&self, spec: &SynthClassSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mel = &self.data.mel;
        let frames = self.data.spec_augment.crop_frames;
        let world = WorldConfig {
            sample_rate: mel.sample_rate,
            audio_seconds: ((frames - 1) * mel.hop_length + mel.win_length) as f64 / mel.sample_rate as f64,
            ..self.world.clone()
        };
        let samples = synth_tone(spec, &world, rng);
        let w = Waveform {
            sample_rate: mel.sample_rate,
            samples,
        };
        let s = normalize_spectrogram(&log_mel_spectrogram(&w, mel)?);
        expand_three_channels(&crop_time(&s, 0, frames.min(s.cols()))?)
    }
}

impl CaptionSampler for PretrainCorpus<'_> {
    fn len(&self) -> usize {
        self.size
    }

    fn sample(&self, i: usize, seed: u64) -> Result<(Tensor, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ seed.rotate_left(17) ^ i as u64);
        let spec = &self.specs[(i / 2) % self.specs.len()];
        let kind = match (i % 2, self.aux) {
            (0, _) => PairKind::Still,
            (_, AuxModality::Flow) => PairKind::Flow,
            (_, AuxModality::Audio) => PairKind::Spectrogram,
        };
        let crop = self.data.crop_hw;
        let room = self.world.frame_hw - crop;
        let mut color = COLORS[rng.random_range(0..COLORS.len())].0;
        let mut shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())].word();
        let mut motion = MOTION_WORDS[rng.random_range(0..MOTION_WORDS.len())];
        let mut pitch = PITCH_WORDS[rng.random_range(0..PITCH_WORDS.len())];
        let image = match kind {
            PairKind::Still => {
                (color, shape) = (COLORS[spec.color].0, spec.shape.word());
                let img = render_still(spec, self.world, rng.random());
                let (y, x) = (rng.random_range(0..=room), rng.random_range(0..=room));
                image_tensor(&img, y, x, crop)?
            }
            PairKind::Flow => {
                motion = MOTION_WORDS[spec.direction];
                let img = self.flow_image(spec, &mut rng)?;
                let (y, x) = (rng.random_range(0..=room), rng.random_range(0..=room));
                flow_tensor(&img, y, x, crop)?
            }
            PairKind::Spectrogram => {
                pitch = PITCH_WORDS[spec.direction];
                self.spectrogram(spec, &mut rng)?
            }
        };
        let phrase = format!("{color} {shape} {motion} {pitch}");
        let template = &self.prompts.templates()[rng.random_range(0..self.prompts.len())];
        Ok((image, template.replacen("{}", &phrase, 1)))
    }
}
