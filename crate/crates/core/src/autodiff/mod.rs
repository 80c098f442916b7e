//! Dense `f64` tensors with a reverse-mode autodiff tape.
//!
//! Shapes must match exactly except for two explicit cases: a matrix times a
//! vector ([`Graph::matmul`]) and a vector added to every row
//! ([`Graph::add_row`]). Scalar constants enter through [`Graph::scale`] and
//! [`Graph::add_scalar`].
//!
//! ```
//! use meow::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0).unwrap(), true);
//! let y = g.square(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, FiniteDiffReport, FiniteDiffSpec};
pub use graph::{Gradients, Graph, Mode, VarId};
pub use kernels::log_sum_exp;
pub use params::{Binding, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss is not recorded on this tape")]
    NotOnTape,
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

#[cfg(test)]
mod tests;
