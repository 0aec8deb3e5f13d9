//! Temporal fusion, cross-attention fusion and the assembled model.

pub mod heads;
pub mod model;

pub use heads::{
    audio_temporal_head, fuse_auxiliary, fuse_video, temporal_fuse, CrossAttentionHead,
    TemporalHead,
};
pub use model::{
    AuxInput, AuxModality, ClipInput, FeatureBundle, ForwardVars, FusionMode, ModelConfig,
    MovModel,
};
