//! Crate-wide error type.

/// Errors produced by the tracking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (dimensions, ranges, incompatible options).
    #[error("configuration error: {0}")]
    Config(String),

    /// Numerical failure: non-finite inputs, singular matrices, zero norms.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Frames processed out of order or inconsistent sequence lengths.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
