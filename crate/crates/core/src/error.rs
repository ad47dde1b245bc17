use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the domain an operation accepts.
    #[error("input domain: {0}")]
    InputDomain(String),
    /// Shapes, lengths or counts that must agree do not.
    #[error("structural: {0}")]
    Structural(String),
    #[error("configuration: {0}")]
    Config(String),
    /// Several validation failures reported together.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("corrupt data in {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },
    #[error("incompatible: {0}")]
    Compatibility(String),
    #[error("parse error in {path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
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

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corruption {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
