//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every forward operation as a node. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! returns the gradient of that scalar with respect to every node.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{Axis, Gradients, Tape, Var};

pub(crate) use array::matmul;
#[cfg(test)]
pub(crate) use array::sigmoid;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: [usize; 2], rhs: [usize; 2] },
    #[error("{op}: input outside domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{0}")]
    Contract(String),
}
