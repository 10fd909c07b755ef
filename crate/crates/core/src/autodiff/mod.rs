//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a [`Graph`] as they execute; [`Graph::backward`]
//! walks the record in reverse. Only the primitives the speech model needs
//! are provided.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, grad_check_at};
pub use graph::{Graph, Patches, Var};
pub(crate) use graph::LN_EPS;
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutogradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
