use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("all weights are zero; cannot normalize")]
    AllZeroWeights,

    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("grammar error: {0}")]
    Grammar(String),

    #[error("grammar expansion exceeded depth cap of {0}")]
    GrammarDepthExceeded(usize),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("cannot train on an empty corpus")]
    EmptyCorpus,

    #[error("training data has no examples of class {0:?}")]
    MissingClass(String),

    #[error("cannot compute a metric over an empty batch")]
    EmptyBatch,

    #[error("model artifact missing: {0}")]
    MissingModel(String),

    #[error("stale artifact {path}: manifest hash {expected}, found {actual}")]
    StaleArtifact {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("model was built for vocabulary {expected}, but the loaded vocabulary hashes to {actual}")]
    VocabularyMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generation aborted at step {step}: {source}")]
    Generation {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
