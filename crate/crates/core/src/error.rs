//! Error type shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar or range argument was outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A condition was handed to a head of a different modality.
    #[error("condition modality mismatch: {0}")]
    Modality(String),

    /// Guided noise collapsed to a constant; its statistics cannot be matched.
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    /// A command or sampler was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),

    /// Checkpoint bytes could not be understood.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset files are missing or corrupt.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
