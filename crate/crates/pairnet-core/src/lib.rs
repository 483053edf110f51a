//! A desk-scale panoptic scene-graph laboratory built around a
//! pair-then-relation pipeline: an oracle segmenter emits object queries,
//! a pair proposal network scores subject/object pairs, and a small
//! transformer decoder fuses selected pairs into relation predictions.
//!
//! Everything runs on f64 CPU tensors with reverse-mode autodiff, is
//! bit-reproducible under fixed seeds, and ships with synthetic panoptic
//! datasets plus the full recall / panoptic-quality metric stack.

pub mod error;
pub mod eval;
pub mod fusion;
pub mod hungarian;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod ppn;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
