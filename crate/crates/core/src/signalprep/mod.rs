//! Raw frames and waveforms to model-ready flow images and spectrograms.

pub mod audio;
pub mod augment;
pub mod flow;
pub mod media;

pub use audio::{
    log_mel_spectrogram, mel_center_frequencies, normalize_spectrogram, resample_to_16k_mono,
    MelConfig, Waveform,
};
pub use augment::{
    crop_and_augment_spectrogram, expand_three_channels, frame_indices, sample_frames, ClipSample,
    SpecAugmentConfig,
};
pub use flow::{estimate_flow, flow_to_image, quantize_flow_value, FlowField, TvL1Config};
pub use media::{Image, RawAudio};
