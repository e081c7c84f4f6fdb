use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("variable `{0}` is missing")]
    MissingVariable(String),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("{count} non-finite cells in `{variable}`, first at (row {row}, col {col})")]
    NonFinite {
        variable: String,
        count: usize,
        row: usize,
        col: usize,
    },

    #[error("patch coverage: {0}")]
    Coverage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("architecture fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at {phase} epoch {epoch}; last good checkpoint: {last_good:?}")]
    TrainingAborted {
        phase: String,
        epoch: usize,
        last_good: Option<PathBuf>,
    },

    #[error("key `{0}` already exists in the store")]
    DuplicateKey(String),

    #[error("key `{0}` not found")]
    MissingKey(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("archive holds {stored} but {requested} was requested")]
    ModeMismatch { stored: String, requested: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("netcdf: {0}")]
    NetCdf(String),

    #[error("sample pairing: {0}")]
    Pairing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
