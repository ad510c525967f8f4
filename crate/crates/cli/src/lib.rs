//! Experiment runner for `zrp-core`: configuration, replica scheduling and artifacts.

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("acceptance failure: {0}")]
    Acceptance(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Acceptance(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}
