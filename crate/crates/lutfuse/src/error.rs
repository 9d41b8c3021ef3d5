//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got a tensor of {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("backward called on a leaf that is not part of a recorded computation")]
    DetachedGraph,

    #[error("parameter `{name}` has no gradient; run backward before the optimizer step")]
    MissingGrad { name: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("parse error at byte offset {offset}: {msg}")]
    ParseAt { offset: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error for {path}: {msg}")]
    ImageDecode { path: PathBuf, msg: String },

    #[error("training aborted at step {step}: loss became non-finite; last good checkpoint kept at {checkpoint}")]
    NonFiniteLoss { step: u64, checkpoint: PathBuf },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
