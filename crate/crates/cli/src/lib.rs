//! Experiment harness around `cldm-core`: config parsing, dataset
//! generation, training, sampling, evaluation and baseline comparison.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::CliError;
