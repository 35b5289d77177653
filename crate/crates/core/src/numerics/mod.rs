//! Dense matrix algebra with reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{
    bce, sigmoid, BatchMoments, Gradients, NormStats, Tape, Var, BCE_CLAMP, NORM_FLOOR,
};
pub use tensor::{matmul, matmul_t, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("softmax row {0} has every entry masked")]
    EmptySoftmaxRow(usize),
    #[error("expected a 1x1 output, got {0:?}")]
    NotScalar([usize; 2]),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
}

#[cfg(test)]
mod tests;
