use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CisError {
    #[error("failed to write dataset {path}: {source}")]
    DatasetWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset validation failed at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid SCM spec: {0}")]
    InvalidSpec(String),

    #[error("exact enumeration is infeasible for C = {num_aus} action units (limit 12)")]
    EnumerationInfeasible { num_aus: usize },

    #[error("observed appearance code has zero probability under the spec")]
    EvidenceImpossible,

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("subject {subject} has no samples; it cannot enter the confounder dictionary")]
    EmptySubject { subject: usize },

    #[error("confounder dictionary is empty")]
    EmptyDictionary,

    #[error("CIS module is not initialized: the confounder dictionary has not been built")]
    NotInitialized,

    #[error("threshold {0} is outside (0, 1)")]
    ThresholdOutOfRange(f64),

    #[error("empty training split")]
    EmptySplit,

    #[error("cannot split {num_subjects} subjects into {k} folds")]
    TooManyFolds { k: usize, num_subjects: usize },

    #[error("need at least {needed} rows, got {actual}")]
    TooFewRows { needed: usize, actual: usize },

    #[error("zero-norm matrix in cosine similarity")]
    ZeroNorm,

    #[error("dataset provenance {found:?} does not match spec hash {expected}")]
    ProvenanceMismatch { expected: String, found: String },

    #[error("checkpoint: unsupported format version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint: missing array `{0}`")]
    MissingArray(String),

    #[error("checkpoint: malformed container: {0}")]
    MalformedCheckpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CisError> = std::result::Result<T, E>;
