use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cache is frozen; write rejected")]
    FrozenWrite,

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Bundle(#[from] BundleError),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(
        "non-finite loss at step {step} (term `{term}`, max |grad| = {max_grad:e})"
    )]
    NumericAbort {
        step: u64,
        term: &'static str,
        max_grad: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures reading or writing a training checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic(Vec<u8>),

    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("shape mismatch for {name}: expected {expected}, found {actual}")]
    Shape {
        name: String,
        expected: String,
        actual: String,
    },

    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

/// Failures reading, writing or validating an embedding bundle.
#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing blob {0}")]
    MissingBlob(PathBuf),

    #[error("size mismatch in {file}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        file: String,
        expected: u64,
        actual: u64,
    },

    #[error("invalid bundle at sample {sample:?}: {message}")]
    Invalid {
        sample: Option<usize>,
        message: String,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("split error: {0}")]
    Split(String),
}
