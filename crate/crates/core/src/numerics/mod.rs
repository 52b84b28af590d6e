//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod gru;
pub mod kernels;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, DEFAULT_STEP, RELATIVE_FLOOR};
pub use graph::{Graph, GruVars, Mode, Var};
pub use params::{stable_hash, stream, Gradients, Initializer, ParamId, ParamSet};
pub use tensor::Tensor;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("{kernel}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        kernel: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{kernel}: {msg}")]
    InvalidArgument { kernel: &'static str, msg: String },
    #[error("{kernel}: non-finite value in input")]
    NonFinite { kernel: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("computation record already consumed by an earlier backward pass")]
    RecordConsumed,
}
