//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate channel: zero standard deviation in channel {0}")]
    DegenerateChannel(usize),

    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(u64),

    #[error("Simpson requires odd point count, got {0}")]
    SimpsonEvenPoints(usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("boundary condition not supported here: {0}")]
    UnsupportedBoundary(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("divergence: non-finite {0} during training")]
    Divergence(&'static str),

    #[error("labels required: {0}")]
    LabelsRequired(&'static str),

    #[error("zero-truth normalization: reference field has zero norm")]
    ZeroTruthNorm,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
