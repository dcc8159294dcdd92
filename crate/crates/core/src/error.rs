use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes. The CLI maps these onto its exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Backend,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(
        "degenerate calibration data: short-context {level} quantile of row {row} is zero"
    )]
    ZeroShortQuantile { row: usize, level: f64 },

    #[error("search budget exceeded: {required} evaluations > budget {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor-file header: {0}")]
    MalformedHeader(String),

    #[error("invalid tensor offsets: {0}")]
    InvalidOffsets(String),

    #[error("truncated tensor payload: {0}")]
    TruncatedPayload(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("no tensors matched patterns {0:?}")]
    NoMatchingTensors(Vec<String>),

    #[error("missing activation cache for length {0}")]
    MissingCache(usize),

    #[error("protocol violation: {message} (line: {line:?})")]
    Protocol { message: String, line: String },

    #[error("backend transport failure: {0}")]
    Transport(String),

    #[error("backend reported error: {0}")]
    Backend(String),

    #[error("evaluation failed ({context}): {source}")]
    Evaluation {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn protocol(message: impl Into<String>, line: impl Into<String>) -> Self {
        Error::Protocol {
            message: message.into(),
            line: line.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. }
            | Error::MalformedHeader(_)
            | Error::InvalidOffsets(_)
            | Error::TruncatedPayload(_) => ErrorClass::Io,
            Error::Protocol { .. } | Error::Transport(_) | Error::Backend(_) => {
                ErrorClass::Backend
            }
            Error::Evaluation { source, .. } | Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
