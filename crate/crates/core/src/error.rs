//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument is outside its valid domain (e.g. a nonpositive
    /// noise level where a variance division is required).
    #[error("domain error in {what}: got {value}")]
    Domain { what: &'static str, value: f64 },

    /// Vector/matrix length mismatch.
    #[error("shape error in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A computation produced or received a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Index lookup out of range (speaker ids, token ids).
    #[error("{what}: index {index} out of range for table of size {len}")]
    Lookup {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Invalid configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Invalid data (e.g. nonpositive durations).
    #[error("invalid data: {0}")]
    Data(String),

    /// Training aborted because the loss became non-finite. State as of the
    /// last finite step is preserved by the caller.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}
