use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        primitive: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{primitive}: non-finite value in output (numeric overflow)")]
    NonFinite { primitive: &'static str },

    #[error("backward root must be scalar-valued, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gradient supplied for parameter `{name}` outside the selected groups")]
    GroupLeak { name: String },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("non-finite loss component `{component}` at iteration {iteration}")]
    Divergence { component: String, iteration: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
