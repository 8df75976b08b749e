//! Contextual spelling correction for ASR hypotheses.
//!
//! A non-autoregressive tagger rewrites recognition hypotheses using a
//! user-supplied list of biasing phrases (contact names, places), optionally
//! conditioned on acoustic features through an external attention. The crate
//! also ships the surrounding machinery: an edit-distance relevance ranker,
//! a semantic-aware augmentation pipeline, a deterministic synthetic
//! ASR-corruption simulator, training with fast partial adaptation and
//! distillation, and an evaluation/latency harness with a bias-embedding
//! cache.

pub mod augment;
pub mod cli;
#[cfg(doctest)]
mod doctest;
pub mod error;
pub mod evalbench;
pub mod model;
pub mod ranker;
pub mod simdata;
pub mod tagging;
pub mod tensor;
pub mod train;
pub mod textcore;

pub use error::{Error, Result};
