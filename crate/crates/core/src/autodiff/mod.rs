//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Values live on a [`Tape`]; each primitive records its output and enough
//! state to produce vector-Jacobian products. Broadcasting is limited to a
//! trailing-suffix operand in `add`/`sub`/`mul` (bias and gain vectors).

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, Coords};
pub use scalar::{DType, Scalar};
pub use tape::{Counters, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
