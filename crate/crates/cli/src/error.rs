use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] deme_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("{failed} of {total} finetuning jobs failed; first failure: {first}")]
    PartialFailure { failed: usize, total: usize, first: Box<CliError> },
}

impl CliError {
    /// Machine-parsable category printed on failure.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Csv { .. } => "csv",
            CliError::PartialFailure { first, .. } => first.category(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}
