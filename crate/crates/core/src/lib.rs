//! Video inpainting detection: ELA-augmented two-stream encoding,
//! quad-directional local attention, ConvLSTM decoding and IoU-loss
//! training, with a synthetic dataset generator.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod jpeg;
pub mod loss_metrics;
pub mod media;
pub mod model;
pub mod nn;
pub mod qdla;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
