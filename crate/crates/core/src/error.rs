use std::path::PathBuf;

/// Errors produced by the advantage lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    InvalidToken { token: usize, vocab: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("probability ratio must be positive, got {0}")]
    InvalidRatio(f64),
    /// A non-finite value showed up where training cannot continue.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
