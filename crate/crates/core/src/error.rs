use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command-line front end to pick an
/// exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    // EDF and raw-data decoding
    #[error("truncated input: need {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("header field `{field}` is not a valid number: {value:?}")]
    HeaderField { field: &'static str, value: String },
    #[error("record duration must be positive, got {0}")]
    ZeroRecordDuration(f64),
    #[error("signal `{label}` has digital min equal to digital max ({value})")]
    DegenerateScaling { label: String, value: i32 },
    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic {
        what: &'static str,
        expected: &'static str,
    },
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    // Channel and interval handling
    #[error("channel `{0}` not present in recording")]
    MissingChannel(String),
    #[error("seizure intervals overlap or are unsorted: [{prev_start}, {prev_end}) then [{start}, {end})")]
    IntervalOverlap {
        prev_start: f64,
        prev_end: f64,
        start: f64,
        end: f64,
    },
    #[error("interval [{start}, {end}) is invalid for a {duration_s} s recording")]
    IntervalOutOfRange {
        start: f64,
        end: f64,
        duration_s: f64,
    },
    #[error("no ictal samples in any recording")]
    NoIctal,
    #[error("insufficient interictal material: need {needed} columns, have {available}")]
    InsufficientInterictal { needed: usize, available: usize },

    // Preprocessing
    #[error("constant input: standard deviation {0:e} below threshold")]
    ConstantInput(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("segment length {len} exceeds signal length {available}")]
    SegmentTooLong { len: usize, available: usize },
    #[error("segment step rounds to zero (length {len}, overlap {overlap})")]
    ZeroStep { len: usize, overlap: f64 },
    #[error("too few segments ({have}) to populate train/validation/test splits")]
    TooFewSegments { have: usize },

    // Numerics
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap the error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } => ErrorKind::Config,
            Error::Shape(_) | Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
