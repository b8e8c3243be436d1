//! Desk-scale mixture-of-experts language model engine.
//!
//! The crate is organized as a stack:
//!
//! - [`tensor`]: reverse-mode autodiff on f64 tensors.
//! - [`model`]: MoE transformer (config, router, attention with rotary
//!   embeddings, checkpointing, plain inference).
//! - [`train`]: schedulers, losses (cross-entropy, preference, load
//!   balancing), AdamW, and the training loop.
//! - [`scope`]: router observability: activation traces, telemetry,
//!   routing embeddings, clustering, steering.
//! - [`tok`]: byte-level BPE tokenizer lab with compression benchmarks.
//! - [`data`]: corpus handling, exact and MinHash/LSH deduplication, and
//!   the long-context retrieval harness.
//!
//! Everything is deterministic given explicit seeds: identical inputs
//! produce bitwise-identical outputs, independent of worker count.

pub mod data;
pub mod error;
pub mod fsio;
pub mod kvtext;
pub mod model;
pub mod scope;
pub mod tensor;
pub mod tok;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, Graph, Tensor, TensorId};
