//! Fake satellite image detection.
//!
//! Tiles are cut into 16x16 blocks. Each block goes through one or more
//! one-stage Saab filter banks ("PixelHops") at stride 1. A boosted-stump
//! classifier scores every channel of the response. The most discriminant
//! channels are picked on validation data, and their block scores are
//! concatenated into an image-level feature for a final stump ensemble.

pub mod boost;
pub mod detector;
pub mod error;
pub mod heatmap;
pub mod image_io;
pub mod json;
pub mod linalg;
pub mod par;
pub mod pixelhop;
pub mod robustness;
pub mod saab;

pub use error::{Error, Result};
