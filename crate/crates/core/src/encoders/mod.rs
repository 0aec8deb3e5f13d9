//! Per-image vision transformers and the prompt-ensembled text encoder.

pub mod text;
pub mod vit;

pub use text::{
    build_embedding_table, encode_class, token_ids, tokenize, EmbeddingTable, PromptSet,
    TextConfig, TextEncoder,
};
pub use vit::{
    interpolate_pos_encoding, patchify, pos_interpolation_matrix, vit_encode, vit_encode_frames,
    Vit, VitConfig,
};
