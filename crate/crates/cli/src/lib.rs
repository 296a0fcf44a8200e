//! Experiment runner: flat `key=value` configuration, per-run output
//! directories and a fixed results table.

mod config;
mod results;
mod runner;

use std::path::Path;

pub use config::{ExperimentConfig, RunMethod};
pub use results::{format_results, parse_results, read_results, write_results, ResultsRow, RESULTS_HEADER};
pub use runner::{
    evaluate_checkpoint, generate_data, obtain_cohort, reproduce_tables, results_path, run_experiment, run_probe,
    sweep_alpha, worker_count, Report, RunFailure,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] lmt_core::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 usage, 3 numeric failure, 4 I/O or file format.
    pub fn exit_code(&self) -> i32 {
        use lmt_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(E::Io(_) | E::Format(_)) => 4,
            CliError::Core(e) if e.is_numeric() || matches!(e, E::Undefined(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}
