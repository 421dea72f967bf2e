use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported mesh: {0}")]
    UnsupportedMesh(String),

    #[error("mesh generation failed: {0}")]
    Generation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("interpolation error: {0}")]
    Interpolation(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure;
