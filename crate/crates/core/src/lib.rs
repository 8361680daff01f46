//! Mitosis detection from point annotations.
//!
//! The pipeline stages are:
//!
//! 1. **stain** – optical density, colour deconvolution, stain augmentation.
//! 2. **localize** – nucleus candidates from the hematoxylin channel.
//! 3. **dgsb** – cluster-stratified negative sampling and a difficulty filter.
//! 4. **incdp** – parent/child losses, feature-distribution mixing, CAM.
//! 5. **nn** – the small convolutional classifier those losses train.
//! 6. **pipeline** – training, detection, matching and metrics.
//! 7. **data** – synthetic H&E data, annotations, configuration.

pub mod data;
pub mod dgsb;
pub mod error;
pub mod incdp;
pub mod localize;
pub mod nn;
pub mod pipeline;
pub mod stain;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use localize::{LocalizeConfig, NucleusCandidate, Patch};
pub use pipeline::{DetectionResult, MatchReport, Metrics, PipelineConfig};
pub use stain::{RgbImage, StainMatrix};

/// A location in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}
