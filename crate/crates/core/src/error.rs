use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scores have no positive mass or contain negative/non-finite entries")]
    ZeroMass,

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty context")]
    EmptyContext,

    #[error("k = {k} exceeds datastore size {size}")]
    KTooLarge { k: usize, size: usize },

    #[error("temperature arity mismatch: {expected} neighbors, {found} temperatures")]
    TemperatureArityMismatch { expected: usize, found: usize },

    #[error("invalid temperature {0}")]
    InvalidTemperature(f64),

    #[error("context-aware interpolation requires the context embedding f(x)")]
    MissingContext,

    #[error("context-aware interpolation requires the token embedding matrix W")]
    MissingW,

    #[error("parameter arity mismatch: {0}")]
    ArityMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },

    #[error("top-q mass {0} exceeds 1")]
    MassExceedsOne(f64),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("format version mismatch: expected {expected}, found {found}")]
    FormatVersionMismatch { expected: u32, found: u32 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("corrupt file at record {record}: {detail}")]
    Corrupt { record: u64, detail: String },

    #[error("records inconsistent with header: {0}")]
    ConsistencyViolation(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

impl Error {
    /// True for errors raised while decoding a file (bad magic, version, header or payload).
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::FormatVersionMismatch { .. }
                | Error::BadMagic { .. }
                | Error::InvalidHeader(_)
                | Error::Corrupt { .. }
                | Error::Parse { .. }
        )
    }

    pub(crate) fn corrupt(record: u64, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            record,
            detail: detail.into(),
        }
    }
}
