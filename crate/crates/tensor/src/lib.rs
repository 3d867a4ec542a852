//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Forward kernels live on [`Tensor`]; differentiable versions of the same
//! ops are methods on [`Var`], which records them on a [`Tape`].

mod element;
mod error;
pub mod shape;
mod tape;
mod tensor;

#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use tape::{Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
