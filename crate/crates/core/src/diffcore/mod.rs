//! Dense `f32` tensors, a reverse-mode tape, small MLPs and their optimizers.

mod gradcheck;
mod mlp;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use mlp::{mlp_forward, mlp_init, Mlp, MlpSpec, ParamTensor};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use rng::Rng;
pub use tape::{Activation, Gradients, Tape, Var, LEAKY_SLOPE, LOG_CLAMP};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {actual} does not match shape product {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("{op}: shape {left:?} incompatible with {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("variable {0} is not on this tape")]
    ForeignVar(usize),
    #[error("backward called before any forward op was recorded")]
    BackwardWithoutForward,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, DiffError>;
