// SPDX-License-Identifier: MIT OR Apache-2.0

//! Symbolic rule extraction for sparse-autoencoder features of attention heads.
//!
//! An attention head's output feature `u` is rewritten in terms of input
//! features `d_j`: the value score `S(k) = d_kᵀ W_Vᵀ u` says how much key
//! feature `k` promotes `u`, and the attention score
//! `A(q, k) = d_qᵀ W_Qᵀ W_K d_k` says how strongly query feature `q` attends to
//! it. Pairs with both scores positive read as skip-gram rules `[k] … [q] → u`.
//!
//! Modules, bottom-up:
//!
//! - [`numkernel`]: tensors, kernels, Adam, seeded randomness
//! - [`atrw`]: the binary tensor container
//! - [`model`]: toy attention heads and tokenization
//! - [`sae`]: sparse autoencoders, training, activation indexing
//! - [`rules`]: scores, candidate selection, ranking, absence and counting detection
//! - [`eval`]: exemplar datasets, metrics, attribution, interventions, reports
//! - [`synth`]: planted-rule models and a brute-force oracle

// Index loops read closer to the maths in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod atrw;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkernel;
pub mod rules;
pub mod sae;
pub mod synth;

pub use error::{Error, Result};
