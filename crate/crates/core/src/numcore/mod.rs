//! Deterministic numerical kernel: tensors, a tape autograd, transformer
//! layers, FFT, gradient checking, optimizer and tensor I/O.

pub mod autograd;
pub mod fft;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use fft::{hamming_window, rfft_magnitude, rfft_power};
pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{mlp_block, multi_head_attention};
pub use ops::{cosine_similarity, entropy, gelu, layer_norm, softmax, ProbabilityVector};
pub use optim::{adamw_step, half_cosine_lr, AdamWConfig};
pub use params::{Gradients, Param, ParamSet};
pub use tensor::Tensor;
