use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid group: {0}")]
    InvalidGroup(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid environment spec: {0}")]
    InvalidEnvSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config error in {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, flags, spec files)
    /// rather than failures at run time. The CLI maps these to exit code 1.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParam(_)
                | Error::InvalidEnvSpec(_)
                | Error::InvalidConfig(_)
                | Error::ConfigFile { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
