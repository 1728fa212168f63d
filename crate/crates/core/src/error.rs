use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sequence too long: {len} tokens exceeds limit {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("unknown base word: {0:?}")]
    UnknownBaseWord(String),
    #[error("language index {index} out of range ({count} languages)")]
    UnknownLanguage { index: usize, count: usize },
    #[error("scene id {0} out of range")]
    SceneOutOfRange(u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("row {row} is not unit norm (norm {norm})")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("label {label} out of range (expected < {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid BIO sequence: {0}")]
    InvalidBio(String),
    #[error("k = {k} exceeds corpus size {m}")]
    KTooLarge { k: usize, m: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite gradient in parameter group {0}")]
    NonFiniteGradient(String),
    #[error("frozen parameter group {0} was modified")]
    FreezeViolation(String),
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch for tensor {0}")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing image file {0}")]
    MissingImage(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
