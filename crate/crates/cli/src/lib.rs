//! Experiment harness: configs, presets, runs, attacks and reports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod presets;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
