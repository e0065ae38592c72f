//! Weakly-supervised image forgery detection.
//!
//! The toolkit covers the whole desk-scale workflow: synthetic tamper data
//! with exact ground truth, pseudo-mask ingestion/calibration, an RGB-only
//! conv encoder with inter-patch consistency learning, deterministic
//! training, no-resize TTA inference, metrics, and an ablation harness.

pub mod ablation;
pub mod consistency;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod geom;
pub mod inference;
pub mod maskops;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
