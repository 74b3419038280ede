//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("invalid config: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("index out of range in {op}: {index} >= {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("gradient for parameter {param} is not finite")]
    NanGradient { param: String },

    #[error("training diverged: {msg}")]
    Diverged { msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
