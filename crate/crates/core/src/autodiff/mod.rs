//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations as they are evaluated. Each node holds its
//! value; [`Graph::backward`] walks the nodes in reverse and returns a
//! [`Gradients`] table for every leaf created with [`Graph::param`]. Leaves
//! created with [`Graph::constant`] never receive gradients, which is how the
//! frozen encoders stay frozen.
//!
//! ```
//! use vprompt::autodiff::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! Graphs are single-use: calling `backward` twice on the same graph fails
//! with [`AutodiffError::BackwardTwice`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{elu, elu_grad, log_sum_exp, softmax, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("cannot normalize a zero-norm vector (row {row})")]
    ZeroNorm { row: usize },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("softmax cross-entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("shape error: {0}")]
    Shape(String),
}

/// Unit-length copy of `v`. Errors on a zero vector instead of smoothing.
///
/// ```
/// let u = vprompt::autodiff::l2_normalize(&[3.0, 4.0]).unwrap();
/// assert!((u[0] - 0.6).abs() < 1e-12 && (u[1] - 0.8).abs() < 1e-12);
/// ```
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, AutodiffError> {
    let g = Graph::new();
    let x = g.constant(Tensor::row(v));
    let y = g.l2_normalize_rows(x)?;
    Ok(g.value(y).into_data())
}

/// Scalar cross-entropy `−log softmax(logits)[label]`.
///
/// ```
/// let l = vprompt::autodiff::softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
/// assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
/// ```
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64, AutodiffError> {
    let g = Graph::new();
    let z = g.constant(Tensor::row(logits));
    let l = g.softmax_cross_entropy(z, label)?;
    Ok(g.scalar(l))
}
