//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A class label is outside the valid range.
    #[error("label {label} out of range for {num_classes} classes (example {index})")]
    Label {
        label: u32,
        num_classes: usize,
        index: usize,
    },

    /// Invalid configuration (CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input bytes: bad magic, truncation, wrong sizes (CLI exit code 3).
    #[error("format error: {0}")]
    Format(String),

    /// Structurally valid input whose pieces disagree, e.g. image/label count mismatch.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (non-scalar loss, missing gradient, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Too many runs diverged for the configured threshold (CLI exit code 4).
    #[error("diverged-run threshold exceeded: {diverged} diverged, at most {allowed} allowed")]
    DivergenceThreshold { diverged: usize, allowed: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error per the external interface contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Format(_) | Error::Consistency(_) => 3,
            Error::DivergenceThreshold { .. } => 4,
            _ => 1,
        }
    }
}
