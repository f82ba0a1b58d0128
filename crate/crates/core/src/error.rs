use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TcdError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("incompatible: {0}")]
    Compatibility(String),
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    Parse(String),
}

pub type Result<T, E = TcdError> = std::result::Result<T, E>;

impl TcdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TcdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        TcdError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
