//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] holds row-major data; [`Tape`] records differentiable
//! operations on tensors and propagates gradients back to parameters.
//! [`ops`] exposes the same forward kernels without a tape.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::Elementwise;
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
