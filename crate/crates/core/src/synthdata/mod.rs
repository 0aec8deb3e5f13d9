//! Procedural multimodal dataset: class world, renderer, class splits and
//! the dataset manifest.

pub mod generate;
pub mod manifest;
pub mod world;

pub use generate::{generate_dataset, SynthConfig};
pub use manifest::{
    load_manifest, split_classes, write_manifest, DatasetManifest, ManifestRecord, Split, SplitSpec,
    MANIFEST_FILE,
};
pub use world::{class_specs, render_clip, RenderedClip, SynthClassSpec, WorldConfig};
