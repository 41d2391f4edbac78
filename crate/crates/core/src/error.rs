use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GenddError>;

#[derive(Debug, Error)]
pub enum GenddError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("setup error: {0}")]
    Setup(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl GenddError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GenddError::Io { path: path.into(), source }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::GenddError::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
