use std::io;

use thiserror::Error;

/// Errors produced anywhere in the perception, calibration, training and
/// evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("record `{id}`: {field} has length {actual}, expected {expected}")]
    Length {
        id: String,
        field: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("record `{id}`: non-finite value in {field}")]
    NonFinite { id: String, field: &'static str },

    #[error("record `{id}`: visual token count must be at least 1")]
    EmptyVisual { id: String },

    #[error("record `{id}`: MOS {value} outside declared scale [{lo}, {hi}]")]
    MosOutOfRange {
        id: String,
        value: f32,
        lo: f32,
        hi: f32,
    },

    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported container version {0}")]
    Version(u32),

    #[error("truncated file: expected at least {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("split protocol: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite gradient in `{0}`")]
    Numeric(&'static str),

    #[error("gradient check failed: max relative error {max:e} exceeds {tolerance:e}")]
    GradientCheck { max: f64, tolerance: f64 },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
