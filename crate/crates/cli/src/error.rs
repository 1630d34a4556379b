use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Runtime(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] decompseg::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(decompseg::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

/// Attaches the failing stage to an error message.
pub struct StageError {
    pub stage: &'static str,
    pub error: CliError,
}

pub trait InStage<T> {
    fn in_stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T, E: Into<CliError>> InStage<T> for std::result::Result<T, E> {
    fn in_stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            error: e.into(),
        })
    }
}
