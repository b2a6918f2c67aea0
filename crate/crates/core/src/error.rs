use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },

    #[error("missing labels for enabled task `{0}`")]
    MissingLabels(&'static str),

    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("cannot decode image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("incompatible model: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }
}
