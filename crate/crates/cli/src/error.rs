use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] evimae::Error),

    #[error("config {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 configuration, 3 data, 4 runtime.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_config() => 2,
            CliError::Core(e) if e.is_data() => 3,
            CliError::ConfigFile { .. } | CliError::Usage(_) => 2,
            CliError::Core(_) | CliError::Io { .. } | CliError::Csv { .. } => 4,
        }
    }
}
