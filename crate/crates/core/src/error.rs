use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown task family `{0}`")]
    UnknownFamily(String),

    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(char),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    OverLength { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("zero-norm direction; the vector cannot be normalized")]
    ZeroDirection,

    #[error("clustering failed: {0}")]
    Cluster(String),

    #[error("invalid weights: {0}")]
    Weights(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing upstream artifact {artifact}; run `elrea {stage}` first")]
    MissingStage { stage: String, artifact: String },

    #[error("artifact {artifact} was produced under config hash {found}, expected {expected}")]
    HashMismatch {
        artifact: String,
        found: String,
        expected: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
