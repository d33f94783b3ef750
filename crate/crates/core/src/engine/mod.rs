//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a define-by-run tape: every op is evaluated as soon as it is
//! appended, and [`Graph::grad`] walks the tape backwards from a scalar
//! objective. Graphs own all of their scratch state, so independent graphs can
//! be built and differentiated on different threads at the same time.

mod graph;
mod linalg;
mod lstm;
mod ops;
mod tensor;

pub use graph::{Graph, NodeId};
pub use ops::Op;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid tensor: shape {shape:?} does not hold {len} values")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("numerical failure at node {node} ({op}): {detail}")]
    Numerical {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("objective node {node} is not a scalar (shape {shape:?})")]
    NonScalarObjective { node: usize, shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
}
