//! Concatenated multi-encoder classifiers for long, multi-source documents.
//!
//! The crate provides:
//!
//! - [`corpus`]: preprocessing, vocabulary construction, equal-segment
//!   splitting, stream assembly, label statistics, and a synthetic
//!   long-tailed corpus generator;
//! - [`ndgrad`]: a dense f64 tensor core with recorded forward computation
//!   and exact reverse-mode gradients;
//! - [`encoders`]: a small transformer encoder, a CNN text encoder, and a
//!   per-label attention head;
//! - [`fusion`]: the concatenated multi-encoder classifier (per-stream
//!   encoders, pooled-feature concatenation, shared sigmoid head);
//! - [`training`]: Adam, a deterministic mini-batch training loop with
//!   early stopping, and thresholded prediction;
//! - [`evaluation`]: per-label and aggregate F1, tail-end analysis,
//!   cross-model rank statistics (Nemenyi critical difference), and
//!   diagram/report export.

pub mod corpus;
pub mod encoders;
mod error;
pub mod evaluation;
pub mod fusion;
pub mod ndgrad;
pub mod training;
pub mod util;

pub use error::{Error, Result};
