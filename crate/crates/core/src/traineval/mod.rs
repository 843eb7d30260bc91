//! Training with Adam and early stopping, evaluation metrics, and
//! multi-seed variant comparisons.

mod experiment;
mod metrics;
mod optim;
mod train;

pub use experiment::{
    evaluate, percent_improvement, run_experiment, run_single, Comparison, ExperimentConfig, RunResult, Stat,
    SummaryRow, Variant,
};
pub use metrics::{evaluate_predictions, Confusion, LengthMetrics, MetricsReport};
pub use optim::{clip_global_norm, Adam};
pub use train::{train, EpochLog, TrainConfig, TrainReport};

use thiserror::Error;

use crate::model::ModelError;
use crate::querydata::QueryDataError;

#[derive(Debug, Error)]
pub enum TrainEvalError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("label {0} is not keep (2) or drop (3)")]
    BadLabel(u8),
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] QueryDataError),
}
