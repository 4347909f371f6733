//! Crate-wide error type.

use thiserror::Error;

/// All the ways a ConQAR operation can fail.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation. The message names
    /// the operation and both offending shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Invalid configuration value (hyperparameter out of range, bad grid,
    /// unknown variant name, ...).
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed input data: unparseable dataset lines, bad cache magic,
    /// unknown file format.
    #[error("format error: {0}")]
    Format(String),

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    Empty(String),

    /// The loss closure handed to the gradient checker produced two
    /// different values for identical inputs (e.g. dropout left enabled).
    #[error("non-deterministic loss: consecutive evaluations differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    /// A NaN or infinity showed up where a finite number was required.
    /// The message names the tensor that first went non-finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Lookup of a user/item/parameter that does not exist.
    #[error("unknown identifier: {0}")]
    Unknown(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;
