//! Experiment runner for the `mfchain` library: configuration, subcommands,
//! CSV artifacts and run manifests.

pub mod commands;
pub mod config;
pub mod manifest;

use mfchain::ErrorFamily;
use thiserror::Error;

pub use commands::{run, Command, RunOptions, RunOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] mfchain::Error),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status: 2 config, 3 numeric, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(e) => match e.family() {
                ErrorFamily::Input => 2,
                ErrorFamily::Numeric => 3,
                ErrorFamily::Verification => 4,
            },
            CliError::Verification(_) => 4,
            CliError::Io(_) => 3,
        }
    }
}
