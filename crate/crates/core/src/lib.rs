//! Ranking-based optimization for Siamese matching.
//!
//! The crate bundles everything needed to train and evaluate a small
//! Siamese tracker with two ranking objectives on top of the usual
//! classification and regression losses:
//!
//! - [`numerics`]: `f64` tensors with tape-based reverse-mode differentiation.
//! - [`geometry`]: boxes, IoU, point-to-box label assignment and box coding.
//! - [`correlation`]: depth-wise and pixel-wise template/search correlation.
//! - [`losses`]: cross-entropy, IoU loss, classification ranking loss,
//!   IoU-guided ranking loss and the ablation baselines.
//! - [`synthdata`]: deterministic synthetic sequences with same-class distractors.
//! - [`pipeline`]: model, training loop, checkpoints and frame-by-frame tracking.
//! - [`evalharness`]: success/precision metrics, ranking diagnostics, ablation tables.

pub mod correlation;
pub mod digest;
pub mod error;
pub mod evalharness;
pub mod geometry;
pub mod kv;
pub mod losses;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;

pub use error::{Error, Result};
