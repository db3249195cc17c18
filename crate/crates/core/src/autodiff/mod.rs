//! Define-by-run reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every primitive as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every trainable leaf.
//! Graphs are rebuilt for each evaluation and are not `Sync`.
//!
//! Broadcasting is deliberately narrow: a binary operand may either match
//! the other's shape, hold a single element, or have a shape equal to a
//! trailing suffix of the other's (a leading batch dimension).

mod array;
mod check;
mod graph;

pub use array::Array;
pub use check::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, Var, DEFAULT_MASK_FILL, LAYER_NORM_EPS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid operand shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}
