use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Utf8 { path: PathBuf, offset: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("vocabulary budget {budget} is below the {required} required symbols")]
    VocabBudget { budget: usize, required: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cross-covariance of a {dict_size}-pair dictionary is rank deficient")]
    RankDeficient { dict_size: usize },
    #[error("alignment index {index} out of range for sentence length {len}")]
    AlignmentIndex { index: usize, len: usize },
    #[error("checkpoint: expected {expected}, found {found}")]
    Checkpoint { expected: String, found: String },
    #[error("config: {0}")]
    Config(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error("model: {0}")]
    Model(String),
    #[error("{0}")]
    Invalid(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
