//! Multimodal open-vocabulary video classification at desk scale.
//!
//! Video, optical-flow and audio-spectrogram features are fused by
//! cross-attention and classified against prompt-ensembled text embeddings.
//! Training sees only base classes; novel classes are scored by combining the
//! fused auxiliary path with the frozen video path.

pub mod commands;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod numcore;
pub mod signalprep;
pub mod synthdata;
pub mod trainer;

pub use error::{MovError, Result};
