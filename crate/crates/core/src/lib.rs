//! Anomaly-aware quadruplet metric learning for assembly progress estimation.
//!
//! The crate covers the whole experiment pipeline:
//!
//! - [`datagen`]: a seeded synthetic "assembly progress" image generator
//! - [`augment`]: Random Erasing pseudo-occlusion for anomaly samples
//! - [`sampler`]: five-sample (and baseline four-sample) training tuples
//! - [`embednet`]: a four-block CNN embedding network with exact gradients
//! - [`loss`]: the anomaly quadruplet / triplet losses and the λ curriculum
//! - [`trainer`]: the training loop, checkpoints and metrics history
//! - [`inference`]: gallery construction and kNN step estimation with rejection
//! - [`eval`]: confusion matrices, adjacent-step error rate, threshold sweeps

pub mod augment;
mod binio;
pub mod datagen;
pub mod embednet;
pub mod error;
pub mod eval;
pub mod inference;
pub mod labeled;
pub mod loss;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use labeled::{Label, LabeledImage};
