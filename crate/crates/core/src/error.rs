use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel {kernel:?} does not fit padded input {input:?}")]
    KernelTooLarge { kernel: Vec<usize>, input: Vec<usize> },
    #[error("invalid probability {0}; expected 0 <= p < 1")]
    InvalidProbability(f64),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid spacing {0:?}")]
    InvalidSpacing(Vec<f64>),
    #[error("foreground has {0} voxels; need at least 2")]
    EmptyForeground(usize),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("invalid epoch {epoch} for schedule of {max} epochs")]
    InvalidEpoch { epoch: usize, max: usize },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
