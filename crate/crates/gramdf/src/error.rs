//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A dyadic level beyond the configured cap was requested.
    #[error("dyadic level {requested} exceeds cap {cap}")]
    Resolution { requested: u32, cap: u32 },

    /// A projection or comparison was attempted across incompatible grid levels.
    #[error("grid level mismatch: {left} vs {right}")]
    LevelMismatch { left: u32, right: u32 },

    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },

    /// Input data is malformed (non-finite entries, wrong lengths, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// A matrix required to be positive semidefinite is not, beyond tolerance.
    #[error("matrix not positive semidefinite: min eigenvalue {lambda_min}")]
    NotPsd { lambda_min: f64 },

    /// An input violates a domain precondition (negative diagonal, t < 0, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Diagonal correction clipped too much spectral mass: the input is
    /// unlikely to come from a Gram-type model.
    #[error("model mismatch: clipped spectral fraction {clipped_fraction} exceeds {max_fraction}")]
    ModelMismatch {
        clipped_fraction: f64,
        max_fraction: f64,
    },

    /// Problem size beyond a hard solver limit.
    #[error("input too large: {size} exceeds limit {limit} ({hint})")]
    TooLarge {
        size: usize,
        limit: usize,
        hint: &'static str,
    },

    /// A file did not parse as the expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
