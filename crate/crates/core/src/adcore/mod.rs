//! Dense tensors, a define-by-run reverse-mode autodiff graph, and seeded
//! random streams.

mod gradcheck;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use rng::Stream;
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{0}: degenerate input (zero norm or empty)")]
    Degenerate(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any differentiable leaf")]
    Detached,
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,
}

impl AdError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AdError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

#[cfg(test)]
pub(crate) mod oracle;
