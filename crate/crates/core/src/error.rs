use std::path::PathBuf;

use xmodal_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid split request: {0}")]
    Split(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] NnError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {component}")]
    NonFinite { component: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("zero-norm feature vector for {0}")]
    ZeroNorm(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
