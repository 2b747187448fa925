//! Face detectors. Both return candidate boxes sorted by descending
//! confidence; extraction keeps the first.

pub mod blob;
pub mod mtcnn;

pub use blob::{BlobConfig, ForegroundBlob};
pub use mtcnn::{Mtcnn, MtcnnConfig, MtcnnNets};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// `[x1, y1, x2, y2]` in pixel coordinates of the input image.
    pub bbox: [f32; 4],
    pub confidence: f32,
}

pub trait FaceDetector: Send + Sync {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorConfig {
    Mtcnn(MtcnnConfig),
    /// Largest connected region that differs from the border colour. Meant
    /// for rendered footage on flat backgrounds, where a learned detector
    /// has nothing face-like to respond to.
    ForegroundBlob(BlobConfig),
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::Mtcnn(MtcnnConfig::default())
    }
}

impl DetectorConfig {
    pub fn build(&self) -> Result<Box<dyn FaceDetector>> {
        Ok(match self {
            DetectorConfig::Mtcnn(c) => Box::new(Mtcnn::packaged(c.clone())?),
            DetectorConfig::ForegroundBlob(c) => Box::new(ForegroundBlob::new(c.clone())),
        })
    }
}
