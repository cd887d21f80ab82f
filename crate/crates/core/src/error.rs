use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the public API.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value violates a precondition (even window size,
    /// indivisible head count, invalid benchmark field, ...).
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called in the wrong parameter state
    /// (e.g. re-parameterizing twice, inference forward before merging).
    #[error("state error: {0}")]
    State(String),

    /// A numeric evaluation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// File I/O failed; the path is included so report writers can say where.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Report (de)serialization failed.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
