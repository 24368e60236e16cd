//! A small deterministic neural-network engine.
//!
//! Supports the layer set needed by the stacked autoencoder and the 1D CNN
//! (dense, conv1d, max-pool, ReLU, dropout, batch norm, flatten, softmax),
//! mean-squared-error and cross-entropy losses, back-propagation and Adam.
//! Convolution is the 1-D, multi-channel form of the usual valid
//! convolution: `out[c, i] = Σ_k Σ_a ω[c, k, a] · in[k, i·stride + a] + b[c]`,
//! with output length `⌊(N − m) / stride⌋ + 1`.
//!
//! Batched kernels may run on several threads, but every reduction is
//! performed in a fixed order so results do not depend on the thread count.

mod adam;
mod layers;
mod loss;
mod model;
mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    softmax, window_output_len, Layer, LayerSpec, Mode, Param, BATCH_NORM_EPSILON,
    BATCH_NORM_MOMENTUM,
};
pub use loss::{cross_entropy_loss, mse_loss};
pub use model::{ModelState, Sequential};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("backward called without a cached training forward pass")]
    NoCachedForward,
    #[error("not a model file")]
    BadMagic,
    #[error("model format version {found}, expected {expected}")]
    FormatVersionMismatch { found: u16, expected: u16 },
    #[error("model checksum mismatch (file truncated or corrupt)")]
    ChecksumMismatch,
    #[error("model file truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
