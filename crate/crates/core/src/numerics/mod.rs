//! Dense matrix computation with reverse-mode gradient propagation.
//!
//! [`Matrix`] is a row-major `f64` matrix with the handful of operations
//! the model needs. [`Graph`] records those operations on a tape and
//! replays analytic adjoints backwards from a scalar loss; the model is
//! small and its topology changes with dialogue length, so the tape is
//! rebuilt per dialogue.

mod graph;
mod matrix;

pub use graph::{Graph, NodeId};
pub use matrix::{elu, leaky_relu, sigmoid, softmax_row, unit_lower_inverse, Matrix};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
    #[error("{op} requires a strictly lower triangular matrix; entry [{row}][{col}] = {value}")]
    NotStrictlyLower { op: &'static str, row: usize, col: usize, value: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}
