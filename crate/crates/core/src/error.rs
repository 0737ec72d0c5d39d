use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("qubit count {0} outside supported range 1..={max}", max = crate::statevector::MAX_QUBITS)]
    QubitCount(usize),

    #[error("qubit index {index} out of range for {n_qubits} qubits")]
    QubitIndex { index: usize, n_qubits: usize },

    #[error("control and target must differ (both {0})")]
    ControlIsTarget(usize),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("state is not normalized: |norm^2 - 1| = {0:e}")]
    NotNormalized(f64),

    #[error("invalid circuit layout: {0}")]
    Layout(String),

    #[error("GLU input width {0} is odd")]
    GluOddWidth(usize),

    #[error("class index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("all attention positions are masked")]
    AllMasked,

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid task specification: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("non-finite gradient in batch {batch} (parameter `{param}`)")]
    NonFinite { batch: usize, param: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Errors caused by bad user input, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. }
                | Error::Io { .. }
                | Error::Checkpoint(_)
                | Error::CheckpointVersion { .. }
                | Error::Diagnostic(_)
                | Error::TapeConsumed
        )
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}
