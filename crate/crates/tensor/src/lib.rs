//! Dense row-major `f64` tensors and a tape that records differentiable
//! operations for reverse-mode gradients.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered
//! with [`Tape::param`] (gradient tracked) or [`Tape::constant`]; every
//! operation on a [`Var`] appends one node. [`Tape::backward`] walks the
//! nodes in reverse and returns the gradients of all tracked leaves.

mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Norms below this are rejected by `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;
