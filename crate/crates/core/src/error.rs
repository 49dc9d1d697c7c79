//! Error type shared across the crate.
//!
//! Variants are grouped by failure class so callers (notably the CLI) can map
//! them to exit codes without string matching.

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or extent mismatch detected while wiring tensors together.
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    /// Invalid configuration value (bad divisibility, zero extent, unknown key).
    #[error("configuration error: {0}")]
    Config(String),

    /// Two pieces of state that must agree do not (plan vs image, manifest vs file).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A caller passed an argument outside the documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Non-finite value produced where a finite one is required.
    #[error("numerical failure at {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// Malformed on-disk artifact (tensor file, manifest, corpus, image).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { op, detail: detail.into() }
    }

    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { location: location.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
