use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("device {device}: axis {axis} has no finite sample")]
    AllNan { device: String, axis: usize },

    #[error("clip has {available} frames but {requested} were requested")]
    TooFewFrames { available: usize, requested: usize },

    #[error("cannot pool an empty token group")]
    EmptyGroup,

    #[error("a compared feature vector has (near) zero norm")]
    ZeroNorm,

    #[error("mask selects no nodes")]
    EmptyMask,

    #[error("split {0:?} contains no clips")]
    EmptySplit(String),

    #[error("unknown device {0:?}")]
    UnknownDevice(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("png error in {path}: {message}")]
    Image { path: PathBuf, message: String },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether the error stems from user-supplied configuration rather than data or runtime.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidParam(_) | Error::UnknownDevice(_))
    }

    /// Whether the error stems from the dataset on disk.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::ManifestMismatch(_)
                | Error::Parse { .. }
                | Error::Image { .. }
                | Error::AllNan { .. }
                | Error::TooFewFrames { .. }
                | Error::EmptySplit(_)
        )
    }
}
