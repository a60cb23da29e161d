//! Minimal reverse-mode automatic differentiation on a tape.
//!
//! Graphs are built eagerly: every op computes its forward value when it is
//! appended, so the tape order is already topological and the backward pass
//! is a single reverse sweep. Graphs are built per batch and dropped.
//!
//! A `Value` (a tape node) holds its shape, forward data, and lazily
//! allocated gradient; gradients accumulate additively. Sharing a mutable
//! tape across threads is forbidden by construction (`Tape` is `!Sync` use
//! is single-owner); distinct tapes may live on distinct threads.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_param};
pub use ops::{rbf, sigmoid, softplus, Op, LN_2PI};
pub use tape::{Tape, ValueId, EMBED_EPS};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward called before forward evaluation")]
    BackwardBeforeForward,
    #[error("backward already ran on this tape")]
    DoubleBackward,
    #[error("non-finite value in {what} at coordinate {index}")]
    NonFinite { what: String, index: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
