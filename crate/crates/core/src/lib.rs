//! Single-stage joint-region detection: GIoU box loss, grid decoding,
//! class-wise NMS, patient-grouped k-fold splitting and detection metrics.

pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod fmtnum;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod postprocess;
pub mod render;

pub use error::{Error, Result};
