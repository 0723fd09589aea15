//! Crate-wide error type.
//!
//! One enum for the whole engine so callers (and the CLI) can map
//! failures onto a small set of categories: shape, numeric, format,
//! config, plan, io.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive was applied to tensors whose shapes do not conform.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A primitive produced NaN or infinity on finite inputs.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Backward pass requested from a non-scalar output.
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    /// Noise schedule construction or lookup outside its domain.
    #[error("schedule: {0}")]
    Schedule(String),

    /// Container file does not start with the expected magic bytes.
    #[error("container: bad magic (expected {expected:?})")]
    BadMagic { expected: &'static str },

    /// Container version byte is not one this build understands.
    #[error("container: unsupported version {0:#04x}")]
    Version(u8),

    /// Container payload shorter than the header promises.
    #[error("container: truncated file ({0})")]
    Truncated(String),

    /// Container header is not valid JSON or misses required fields.
    #[error("container: malformed header: {0}")]
    Header(String),

    /// Invalid run or module configuration.
    #[error("config: {0}")]
    Config(String),

    /// Edit plan violates its ordering or interval invariants.
    #[error("plan: {0}")]
    Plan(String),

    /// Training loss became NaN.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
