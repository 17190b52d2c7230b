use std::path::Path;

use thiserror::Error;

use cis_core::CisError;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid config/spec files.
    #[error("{0}")]
    Config(String),
    /// Dataset files that are missing, malformed or inconsistent.
    #[error("{0}")]
    Data(String),
    /// Anything failing while training or evaluating.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn config(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{context}: {err}"))
    }

    pub fn data(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {err}"))
    }

    pub fn missing(path: &std::path::Path) -> Self {
        CliError::Config(format!("file not found: {}", path.display()))
    }

    pub fn write(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Runtime(format!("failed to write {}: {err}", path.display()))
    }
}

impl From<CisError> for CliError {
    fn from(err: CisError) -> Self {
        let msg = err.to_string();
        match err {
            CisError::Config(_)
            | CisError::InvalidSpec(_)
            | CisError::ThresholdOutOfRange(_)
            | CisError::TooManyFolds { .. }
            | CisError::EnumerationInfeasible { .. } => CliError::Config(msg),
            CisError::Validation { .. }
            | CisError::Read { .. }
            | CisError::ProvenanceMismatch { .. }
            | CisError::DimensionMismatch { .. } => CliError::Data(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Fails with a config error naming `path` if it does not exist.
pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}
