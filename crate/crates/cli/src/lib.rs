//! Command-line pipeline: synthetic data, graph mining, training,
//! evaluation, prediction and variant comparison.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;

pub use app::{main_with, run, Cli};
pub use config::{Precision, RunConfig};
pub use error::{CliError, Kind};
