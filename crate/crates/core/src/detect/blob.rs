use image::{GrayImage, Luma, RgbImage};
use imageproc::region_labelling::{connected_components, Connectivity};
use serde::{Deserialize, Serialize};

use super::{Detection, FaceDetector};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    /// Per-channel distance from the background colour that counts as foreground.
    pub threshold: u8,
    /// Smallest accepted region, as a fraction of the frame area.
    pub min_area_fraction: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self { threshold: 40, min_area_fraction: 0.02 }
    }
}

pub struct ForegroundBlob {
    config: BlobConfig,
}

impl ForegroundBlob {
    pub fn new(config: BlobConfig) -> Self {
        Self { config }
    }
}

fn border_median(image: &RgbImage) -> [u8; 3] {
    let (w, h) = image.dimensions();
    let mut channels: [Vec<u8>; 3] = Default::default();
    for (x, y, px) in image.enumerate_pixels() {
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            for c in 0..3 {
                channels[c].push(px[c]);
            }
        }
    }
    channels.map(|mut v| {
        v.sort_unstable();
        v[v.len() / 2]
    })
}

impl FaceDetector for ForegroundBlob {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>> {
        let (w, h) = image.dimensions();
        if w < 3 || h < 3 {
            return Ok(Vec::new());
        }
        let bg = border_median(image);
        let mask = GrayImage::from_fn(w, h, |x, y| {
            let px = image.get_pixel(x, y);
            let far = (0..3).any(|c| px[c].abs_diff(bg[c]) > self.config.threshold);
            Luma([u8::from(far)])
        });
        let labels = connected_components(&mask, Connectivity::Four, Luma([0u8]));
        let mut regions: std::collections::BTreeMap<u32, (usize, [u32; 4])> = Default::default();
        for (x, y, label) in labels.enumerate_pixels() {
            if label[0] == 0 {
                continue;
            }
            let entry = regions.entry(label[0]).or_insert((0, [x, y, x, y]));
            entry.0 += 1;
            let b = &mut entry.1;
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
        let min_area = self.config.min_area_fraction * (w * h) as f64;
        let mut found: Vec<(usize, Detection)> = regions
            .into_values()
            .filter(|(area, _)| *area as f64 >= min_area)
            .map(|(area, b)| {
                let bbox = [b[0] as f32, b[1] as f32, (b[2] + 1) as f32, (b[3] + 1) as f32];
                let box_area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1]);
                (area, Detection { bbox, confidence: area as f32 / box_area })
            })
            .collect();
        // largest region first
        found.sort_by(|a, b| b.0.cmp(&a.0));
        Ok(found.into_iter().map(|(_, d)| d).collect())
    }
}
