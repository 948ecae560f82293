// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported container version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("feature {feature} is ineligible: {reason}")]
    Ineligible { feature: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("conflicting plant specs: {0}")]
    ConflictingSpecs(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
