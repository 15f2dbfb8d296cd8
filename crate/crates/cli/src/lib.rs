//! Command implementations behind the `exnet` binary.
//!
//! Exit codes: 0 success, 1 I/O or other runtime error, 2 configuration
//! error, 3 numeric blow-up, 4 aeon consistency failure, 5 gradient check
//! failure.

pub mod commands;
pub mod config;

use thiserror::Error;

pub use config::{Prepared, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric blow-up at trial {trial}: {reason}")]
    Numeric { trial: u64, reason: String },
    #[error("aeon consistency failure: {0}")]
    Consistency(String),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Consistency(_) => 4,
            CliError::Gradcheck(_) => 5,
            CliError::Io(_) | CliError::Runtime(_) => 1,
        }
    }
}
