//! Minimal reverse-mode automatic differentiation for small convolutional
//! networks in double precision.
//!
//! A [`Tape`] records operations as they execute. Leaves are created with
//! [`Tape::leaf`] (trainable) or [`Tape::constant`]; every op returns a
//! [`Var`] handle. [`Tape::backward`] fills gradients for every trainable node
//! reachable from a scalar loss. There is no implicit broadcasting.

mod conv;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use conv::{Conv2dOptions, PadMode};
pub use gradcheck::{check_gradients, check_gradients_with_floor, GradCheckReport};
pub use ops::sigmoid;
pub use tape::{Activation, BinaryOp, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("function under gradient check is not deterministic")]
    NonDeterministic,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Transposed-conv weight (C×C×4×4) that makes stride 2 / padding 1 an exact
/// nearest-neighbour ×2 upsampling of each channel.
pub fn nearest_upsample_kernel(channels: usize) -> Tensor {
    let mut w = vec![0.0; channels * channels * 16];
    for c in 0..channels {
        let base = (c * channels + c) * 16;
        for ky in 1..3 {
            for kx in 1..3 {
                w[base + ky * 4 + kx] = 1.0;
            }
        }
    }
    Tensor::new(vec![channels, channels, 4, 4], w).expect("kernel shape")
}
