use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("jpeg codec error: {0}")]
    Codec(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("training data must contain both real and fake samples")]
    SingleClass,
    #[error("filter bank configured for {expected}, got {actual}")]
    ConfigMismatch { expected: String, actual: String },
    #[error("channel index {index} out of range for {len} channels")]
    Index { index: usize, len: usize },
    #[error("empty channel report")]
    EmptyReport,
    #[error("channel {0} has no retained classifier")]
    MissingChannel(String),
    #[error("unsupported model format version {0}")]
    FormatVersion(u32),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
