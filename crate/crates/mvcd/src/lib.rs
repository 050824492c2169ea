//! Multi-view correlation distillation for incremental object detection,
//! shrunk to desk scale.
//!
//! A frozen "old" detector teaches an incremental detector new object
//! classes without the old training data. The transfer happens through
//! correlation distillation in feature space: pairwise cosine-similarity
//! structure among important channels, among discriminative spatial
//! points, and among intra-instance patches, plus a plain L1 distillation
//! on the output layers. The crate ships the losses with hand-derived
//! gradients, a micro two-stage detector that trains on CPU in seconds,
//! a dual-network incremental trainer, detection evaluation (AP / mAP),
//! and the Stability-Plasticity-mAP metric.

pub mod attention;
pub mod boxes;
pub mod datagen;
pub mod distill;
pub mod evalkit;
pub mod microdet;
pub mod tensor;
pub mod trainer;

mod error;
mod rngutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
