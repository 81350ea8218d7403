//! Shared error type. Everything fallible in the crate returns [`Result`].

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the primitive being applied.
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Invalid configuration value (bad hyperparameter, inconsistent sizes, …).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A corpus/vocabulary/checkpoint file could not be parsed.
    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    /// Checkpoint container violations (bad magic, manifest/payload mismatch, …).
    #[error("checkpoint error in {path}: {detail}")]
    Checkpoint { path: String, detail: String },

    /// A loss or gradient became non-finite during training.
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}, student {student}")]
    Diverged {
        epoch: usize,
        step: usize,
        student: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Convenience constructor for shape errors from op implementations.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
