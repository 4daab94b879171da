use std::io;

use thiserror::Error;

use crate::pipeline::{Checkpoint, Stage};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of checkpoint and corpus files. Each maps to its own code so
/// callers can tell a truncated file from a file written by another version.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("file truncated while reading {what}")]
    Truncated { what: String },
    #[error("unknown parameter name {0:?}")]
    UnknownParameter(String),
    #[error("missing parameter {0:?}")]
    MissingParameter(String),
    #[error("malformed content: {0}")]
    Malformed(String),
}

impl FormatError {
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::Version { .. } => 2,
            FormatError::Truncated { .. } => 3,
            FormatError::UnknownParameter(_) => 4,
            FormatError::MissingParameter(_) => 5,
            FormatError::Malformed(_) => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-deterministic function: {0}")]
    NonDeterministic(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("length regulator produced no frames (durations sum to zero)")]
    EmptyOutput,

    #[error("{stage} stage modified frozen parameters: {params:?}")]
    FreezeViolation { stage: Stage, params: Vec<String> },

    #[error("transcript present in adaptation input: {0}")]
    TranscriptPresent(String),

    #[error("unknown speaker {0}")]
    UnknownSpeaker(u32),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Training hit a non-finite value; `last_good` holds the parameters
    /// before the failing update.
    #[error("{stage} stage aborted at step {step}: {source}")]
    Aborted {
        stage: Stage,
        step: usize,
        last_good: Box<Checkpoint>,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Wraps an error with the name of the sub-operation it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// The innermost error, with stage labels removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Aborted { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::FreezeViolation { .. } => 3,
            Error::NonFinite(_) => 4,
            Error::Io(_) | Error::Format(_) => 5,
            _ => 2,
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
