//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by tensor ops, model construction, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible operand shapes, e.g. matmul inner extents.
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Shape does not match the amount of data backing it.
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    /// Invalid configuration value (ranks, ratios, extents, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// API misuse (non-scalar loss, empty split, wrong checkpoint kind, ...).
    #[error("usage: {0}")]
    Usage(String),

    /// Operation not valid in the current state (double merge, ...).
    #[error("invalid state: {0}")]
    State(String),

    /// Input data violates a documented contract (non-binary targets, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// Internal bookkeeping mismatch (missing gradient on a trainable leaf).
    #[error("consistency: {0}")]
    Consistency(String),

    /// Training hit a non-finite loss; carries the abort diagnostics.
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr}")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        lr: f64,
    },

    /// Filesystem failure with the path that caused it.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Unreadable or truncated on-disk artifact.
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
