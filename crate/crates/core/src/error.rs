//! Error types shared across the crate.
//!
//! File-format problems keep their own enums so callers (and tests) can match
//! on the exact failure class instead of parsing strings.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor format: {0}")]
    Tensor(#[from] TensorError),

    #[error("manifest record `{id}`: {msg}")]
    Manifest { id: String, msg: String },

    #[error("manifest: {0}")]
    ManifestFile(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failure classes for the binary tensor file format.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("bad magic (expected LEANTNSR)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype {0}")]
    BadDtype(u32),
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("payload size mismatch: header implies {expected} bytes, found {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("zero dimension in header")]
    ZeroDim,
    #[error("unsupported rank {0} (expected 2)")]
    BadRank(u32),
    #[error("non-finite payload value at element {0}")]
    NonFinite(usize),
}

/// Failure classes for checkpoint directories.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got}, expected {expected}")]
    TensorShape {
        name: String,
        expected: String,
        got: String,
    },
    #[error("{0}")]
    Meta(String),
}
