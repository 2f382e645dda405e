use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sentence has no tokens")]
    EmptySentence,

    #[error("document pool is empty")]
    EmptyPool,

    #[error("word {0:?} does not occur in the document pool and smoothing is disabled")]
    UnseenWord(String),

    #[error("cannot normalize an empty set of scores")]
    EmptyScores,

    #[error("row {row} has norm {norm:e}, below the normalization threshold")]
    ZeroNorm { row: usize, norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix data length {len} does not match {rows}x{dim}")]
    ShapeMismatch { rows: usize, dim: usize, len: usize },

    #[error("pair {pair} has no admissible {side} negative in the batch")]
    NoNegative { pair: usize, side: &'static str },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("K must satisfy 1 <= K <= gallery size ({gallery}), got {k}")]
    InvalidK { k: usize, gallery: usize },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("ground truth set is empty")]
    EmptyGroundTruth,

    #[error("need at least 2 hierarchy levels, got {0}")]
    TooFewLevels(usize),

    #[error("missing recall entry {0}")]
    MissingRecall(String),

    #[error("vocabulary exhausted: {0}")]
    VocabExhausted(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
