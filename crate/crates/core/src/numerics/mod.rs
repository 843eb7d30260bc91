//! Dense tensors, activations, normalization, loss primitives and a
//! reverse-mode gradient tape.

mod kernels;
pub mod ops;
mod scalar;
pub mod tape;
mod tensor;

pub use ops::{
    add_norm_with, cross_entropy, finite_diff_grad, gelu, layer_norm, softmax_row, NormDenominator, LOG_FLOOR,
};
pub use scalar::Scalar;
pub use tape::{GradientTape, Gradients, ParamStore, SeqLayout, Var};
pub use tensor::Tensor;

pub(crate) use kernels::gemm_nn as kernels_gemm;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumericsError {
    #[error("empty input")]
    Empty,
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("rows have different lengths")]
    Ragged,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("epsilon must be positive")]
    NonPositiveEpsilon,
    #[error("finite-difference step must be positive")]
    NonPositiveStep,
    #[error("row {row} is not a probability distribution")]
    NotADistribution { row: usize },
    #[error("row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
