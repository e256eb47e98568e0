use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("sequence shorter than filter (length {len}, filter height {height})")]
    SequenceTooShort { len: usize, height: usize },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient tape already consumed")]
    TapeConsumed,

    #[error("absolute continuity violated at index {0}")]
    AbsoluteContinuity(usize),

    #[error("distributions have different supports ({0} vs {1} entries)")]
    SupportMismatch(usize, usize),

    #[error("insufficient records: {0}")]
    InsufficientRecords(String),

    #[error("tickets and target must share subword support (ticket vocab {ticket}, target vocab {target})")]
    VocabMismatch { ticket: String, target: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("ticket file {path}: {reason}")]
    TicketFormat { path: PathBuf, reason: String },

    #[error("ticket file {path}: checksum mismatch")]
    Checksum { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::NonFinite(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}
