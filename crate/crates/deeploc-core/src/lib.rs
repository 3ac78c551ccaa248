//! Anchor-based object detection for wrist X-ray pathology: a YOLOv7-style
//! detector with optional Swin-transformer (SWCSP) and GAM/CBAM attention
//! blocks inserted before the detection heads, plus the preprocessing,
//! assignment, loss, evaluation and GradCAM++ machinery around it.

pub mod assign;
pub mod datamodel;
pub mod engine;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod geometry;
pub mod loss;
pub mod preprocess;
pub mod model;

pub use error::{Error, Result};
