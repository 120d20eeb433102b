use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}, column {column}: cannot parse {value:?} as a finite number")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("table is empty: {0}")]
    EmptyTable(&'static str),

    #[error("column {column} is constant (min == max == {value}); it cannot be normalized")]
    DegenerateColumn { column: String, value: f64 },

    #[error("value {0} is outside [0, 1]")]
    OutOfRange(f64),

    #[error("value {0} is not on the 4-decimal grid in [0, 0.9999]")]
    NotQuantized(f64),

    #[error("column index {index} out of range for {columns} columns")]
    ColumnOutOfRange { index: usize, columns: usize },

    #[error("invalid split: n_train = {n_train} with {total} rows (need 0 < n_train < total)")]
    InvalidSplit { n_train: usize, total: usize },

    #[error("grammar error at offset {offset}: {message}")]
    Grammar { offset: usize, message: String },

    #[error("expected {expected} columns, found {found}")]
    ColumnCountMismatch { expected: usize, found: usize },

    #[error("token id {0} is not in the vocabulary")]
    InvalidTokenId(u32),

    #[error("sequence of {body} tokens plus framing exceeds max length {max_len}")]
    SequenceTooLong { body: usize, max_len: usize },

    #[error("invalid vocabulary file: {0}")]
    InvalidVocab(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no masked positions in batch; loss is undefined")]
    NoMaskedPositions,

    #[error("no maskable positions in sequence")]
    NoMaskCandidates,

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch (file truncated or corrupt)")]
    ChecksumMismatch,

    #[error("checkpoint vocab hash {found} does not match expected {expected}")]
    VocabMismatch { expected: String, found: String },

    #[error("nothing to impute: {0}")]
    NothingToImpute(&'static str),

    #[error("negative input for {0}")]
    NegativeInput(&'static str),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
