use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KwsError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KwsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KwsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data/checkpoint, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            KwsError::Config(_) | KwsError::ConfigRead { .. } => 2,
            KwsError::Shape(_) | KwsError::Data(_) | KwsError::Checkpoint(_) | KwsError::Io { .. } => 3,
            KwsError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, KwsError>;
