//! LoRA fine-tuning of a promptable segmentation model for license plate
//! detection: model, adapters, data handling, two-stage training, inference
//! and detection metrics.

pub mod boxes;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod lora;
pub mod mask;
pub mod model;
pub mod nn;
pub mod params;
pub mod training;

pub use error::{Error, Result};
