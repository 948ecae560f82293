// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run-directory pipeline and HTTP API for attention rule extraction.
//!
//! A run moves through `synth` (or an external model and corpus),
//! `train-sae`, `extract`, `eval` and `intervene`; each stage writes into
//! one directory whose `manifest.json` hashes every artifact. `serve`
//! exposes a finished run over JSON.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod rundir;
pub mod server;

pub use config::RunConfig;
pub use error::{PipelineError, Result};
