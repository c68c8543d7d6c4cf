//! Gradient harmonization for a tri-modal (video, audio, text) contrastive
//! encoder trained with two pairwise losses.
//!
//! The crate bundles a small shared-backbone encoder with hand-written
//! backpropagation, the harmonizer that compares and combines the two loss
//! gradients, a synthetic data generator with controllable misalignment, a
//! training loop and the evaluation/diagnostic tools.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod harmonizer;
pub mod linalg;
pub mod model;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
