//! Desk-scale inference kit for an attention-augmented YOLOv7 detector.
//!
//! The crate provides a small NCHW f32 tensor library, the ACmix hybrid
//! convolution/self-attention operator, the GAM channel/spatial attention
//! gates, the composite detector blocks (CBS, MP, Sppcspc, Rep,
//! AC-E-ELAN, ResNet-ACmix), a toy full-model assembly with box decoding,
//! K-means++ anchor clustering under the 1-IoU distance, and a complete
//! detection-evaluation pipeline (AP/mAP, confusion matrix, FPS harness).
//!
//! All operations are pure functions of immutable inputs. With the
//! `parallel` feature (on by default) the inner loops fan out over rayon;
//! per-element reduction order is fixed either way, so results are
//! bit-identical between the parallel and sequential builds.

pub mod acmix;
pub mod anchors;
pub mod archive;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod gam;
pub mod metrics;
pub mod model;
pub mod tensor;

mod error;

pub use error::{Error, Result};

/// Elementwise tolerance for single primitive ops.
pub const TOL_ELEMENTWISE: f32 = 1e-6;
/// Tolerance for composite ops (several primitives chained).
pub const TOL_COMPOSITE: f32 = 1e-5;
