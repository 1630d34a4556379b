use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree along a named axis.
    #[error("dimension mismatch on axis `{axis}`: expected {expected}, got {actual}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A value violates a type invariant (range, simplex, finiteness).
    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Model construction failed at a named stage.
    #[error("construction error at {stage}: {reason}")]
    Construction { stage: String, reason: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("resource error: {0}")]
    Resource(String),

    /// A checkpoint was written for a different model specification.
    #[error("model specification mismatch:\n{0}")]
    SpecMismatch(String),

    /// Stage ordering violated, e.g. joint training without a classifier.
    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("tensor archive error: {0}")]
    Tensors(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
        }
    }
}

/// Checks one axis length, producing a [`Error::Dimension`] on mismatch.
pub(crate) fn ensure_dim(axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(axis, expected, actual))
    }
}
