use std::path::PathBuf;

use thiserror::Error;

/// Failure categories, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("solver failure: {message}{}", diagnostics.as_ref().map(|p| format!(" (diagnostics written to {})", p.display())).unwrap_or_default())]
    Solver {
        message: String,
        diagnostics: Option<PathBuf>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver { .. } => 3,
            CliError::Io(_) => 4,
        }
    }

    pub(crate) fn solver(err: impl std::fmt::Display) -> Self {
        CliError::Solver {
            message: err.to_string(),
            diagnostics: None,
        }
    }
}

impl From<crossdiff::Error> for CliError {
    fn from(err: crossdiff::Error) -> Self {
        match err {
            crossdiff::Error::Config(msg) => CliError::Config(msg),
            crossdiff::Error::InvalidGrid(msg) => CliError::Config(msg),
            other => CliError::solver(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Io(err.to_string())
    }
}
