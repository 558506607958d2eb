//! Patch-token dropout for Vision Transformer training.
//!
//! Images are patchified and embedded (positional embeddings included)
//! before a random subset of patch tokens is kept for the transformer
//! stack; the CLS token always survives, and evaluation uses every patch.
//! The crate also carries the analytic and instrumented cost model used to
//! quantify the compute and memory saved.

pub mod cost;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod model;
pub mod numerics;
pub mod plot;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
