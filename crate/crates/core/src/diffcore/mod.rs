//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation in creation order; [`Tape::backward`]
//! walks it in reverse and returns the adjoint of every node that depends on a
//! trainable leaf. Elementwise binary ops only broadcast a single-element
//! operand against a tensor; every other shape combination must match
//! exactly. Every forward op rejects non-finite results.
//!
//! Reductions (`sum`, `mean`) accumulate sequentially in row-major order, and
//! the backward pass is single-threaded, so results are bitwise reproducible.

mod check;
mod tape;
mod tensor;

pub use check::{gradient_check, gradient_check_many};
pub use tape::{Gradients, GatherPlan, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softplus};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: bad shape {shape:?}, expected {expected}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}
