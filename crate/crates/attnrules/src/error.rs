// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    /// A stage input is missing or not usable.
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("integrity failure: {0}")]
    Integrity(String),
    #[error(transparent)]
    Core(#[from] attnrules_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 eligibility or dependency, 4 integrity,
    /// 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Dependency(_) | PipelineError::Core(attnrules_core::Error::Ineligible { .. }) => 3,
            PipelineError::Integrity(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
