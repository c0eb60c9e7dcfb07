//! mimicgait: occluded gait recognition at desk scale.
//!
//! The crate covers the full pipeline: procedural silhouette data synthesis,
//! synthetic consistent/dynamic occlusions with exact replay, a pluggable gait
//! backbone with teacher pretraining, a visibility estimation network (VEN),
//! visibility-guided mimic training with a multi-instance correlational
//! distillation loss, and a rank-retrieval / verification evaluation harness
//! with generalizability, adaptability and relative-performance protocols.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod occlusion;
pub mod rng;
pub mod silhouette;
pub mod train;
pub mod ven;
pub mod walker;

pub use error::{Error, Result};

/// Version string embedded in checkpoints and reports.
pub fn version_string() -> String {
    format!("mimicgait-{}", env!("CARGO_PKG_VERSION"))
}
