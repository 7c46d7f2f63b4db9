//! Minimal reverse-mode autodiff engine: tensors, a recording tape, the
//! primitives the GAN needs, Adam, and a finite-difference oracle.

mod adam;
pub mod conv;
mod finite_diff;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use finite_diff::{finite_difference_grad, max_relative_error, relative_error};
pub use tape::{sigmoid, softmax_rows, BatchMoments, Gradients, Mode, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;

/// Slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;
