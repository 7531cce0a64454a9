//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during one forward pass. Each
//! operator appends its output and a node describing how to push the output
//! adjoint back to its inputs. [`Tape::backward`] walks the nodes in reverse
//! and adds the resulting gradients into every tensor flagged
//! `requires_grad`, so repeated calls accumulate until a reset.
//!
//! Trainable weights live in a [`ParamStore`] outside any tape. A forward pass
//! binds them into the tape either as differentiable leaves or as constants;
//! binding as a constant stops the parameter from being updated while still
//! letting gradients flow through the operator to its other inputs.

mod gemm;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use ops::OpKind;
pub use optim::{Sgd, SgdConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross_entropy: target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("cross_entropy: {targets} targets for a batch of {batch}")]
    TargetCount { targets: usize, batch: usize },
}
