//! Config-driven experiments over `promptlab`: few-shot grids, parameter
//! sweeps, template comparisons, random search and report tables.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod runner;

use std::path::PathBuf;

pub use config::{ExperimentConfig, SampleSize};
pub use error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PROMPTLAB_OUT";

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("results"), PathBuf::from)
}
