//! Training-time image augmentation. Every draw comes from the caller's
//! seeded stream, so a (seed, epoch, sample) triple always yields the same
//! image.

use image::{imageops, Rgb, RgbImage};
use imageproc::geometric_transformations::{rotate_about_center, Interpolation};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flip {
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub p: f64,
    pub max_degrees: f64,
}

/// Rescale by a factor in `[min_scale, max_scale]`, then crop or pad back to
/// the original size at a random offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizeCrop {
    pub p: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

/// Brightness, contrast and saturation factors drawn from `1 +- magnitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blur {
    pub p: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub horizontal_flip: Flip,
    pub rotation: Rotation,
    pub resize_crop: ResizeCrop,
    pub color_jitter: ColorJitter,
    pub gaussian_blur: Blur,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            horizontal_flip: Flip { p: 0.5 },
            rotation: Rotation { p: 0.5, max_degrees: 15.0 },
            resize_crop: ResizeCrop { p: 0.5, min_scale: 0.8, max_scale: 1.2 },
            color_jitter: ColorJitter { p: 0.8, brightness: 0.2, contrast: 0.2, saturation: 0.2 },
            gaussian_blur: Blur { p: 0.3, min_sigma: 0.1, max_sigma: 2.0 },
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [
            self.horizontal_flip.p,
            self.rotation.p,
            self.resize_crop.p,
            self.color_jitter.p,
            self.gaussian_blur.p,
        ];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let rc = &self.resize_crop;
        if !(rc.min_scale > 0.0 && rc.min_scale <= rc.max_scale) {
            return Err(Error::Config("resize_crop needs 0 < min_scale <= max_scale".into()));
        }
        let b = &self.gaussian_blur;
        if !(b.min_sigma > 0.0 && b.min_sigma <= b.max_sigma) {
            return Err(Error::Config("gaussian_blur needs 0 < min_sigma <= max_sigma".into()));
        }
        Ok(())
    }

    /// Applies the enabled transforms in a fixed order: flip, rotation,
    /// resize-and-crop, colour jitter, blur.
    pub fn apply(&self, image: &RgbImage, rng: &mut SeededRng) -> RgbImage {
        if !self.enabled {
            return image.clone();
        }
        let mut img = image.clone();
        if rng.bernoulli(self.horizontal_flip.p) {
            imageops::flip_horizontal_in_place(&mut img);
        }
        if rng.bernoulli(self.rotation.p) {
            let deg = rng.uniform(-self.rotation.max_degrees, self.rotation.max_degrees);
            img = rotate_about_center(&img, deg.to_radians() as f32, Interpolation::Bilinear, Rgb([0, 0, 0]));
        }
        if rng.bernoulli(self.resize_crop.p) {
            let s = rng.uniform(self.resize_crop.min_scale, self.resize_crop.max_scale);
            img = resize_crop(&img, s, rng);
        }
        if rng.bernoulli(self.color_jitter.p) {
            let cj = &self.color_jitter;
            let b = rng.uniform(1.0 - cj.brightness, 1.0 + cj.brightness) as f32;
            let c = rng.uniform(1.0 - cj.contrast, 1.0 + cj.contrast) as f32;
            let s = rng.uniform(1.0 - cj.saturation, 1.0 + cj.saturation) as f32;
            img = color_jitter(&img, b, c, s);
        }
        if rng.bernoulli(self.gaussian_blur.p) {
            let sigma = rng.uniform(self.gaussian_blur.min_sigma, self.gaussian_blur.max_sigma) as f32;
            img = imageproc::filter::gaussian_blur_f32(&img, sigma);
        }
        img
    }
}

fn resize_crop(img: &RgbImage, scale: f64, rng: &mut SeededRng) -> RgbImage {
    let (w, h) = img.dimensions();
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    let resized = imageops::resize(img, nw, nh, imageops::FilterType::Triangle);
    if nw >= w && nh >= h {
        let x = rng.below((nw - w + 1) as u64) as u32;
        let y = rng.below((nh - h + 1) as u64) as u32;
        return imageops::crop_imm(&resized, x, y, w, h).to_image();
    }
    let mut out = RgbImage::new(w, h);
    {
        let x = rng.below((w.saturating_sub(nw) + 1) as u64) as i64;
        let y = rng.below((h.saturating_sub(nh) + 1) as u64) as i64;
        imageops::overlay(&mut out, &resized, x, y);
    }
    out
}

fn luma(p: &Rgb<u8>) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

fn color_jitter(img: &RgbImage, brightness: f32, contrast: f32, saturation: f32) -> RgbImage {
    let clamp = |v: f32| v.round().clamp(0.0, 255.0) as u8;
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = Rgb(p.0.map(|c| clamp(c as f32 * brightness)));
    }
    let mean = out.pixels().map(luma).sum::<f32>() / (out.width() * out.height()) as f32;
    for p in out.pixels_mut() {
        *p = Rgb(p.0.map(|c| clamp(mean + contrast * (c as f32 - mean))));
    }
    for p in out.pixels_mut() {
        let g = luma(p);
        *p = Rgb(p.0.map(|c| clamp(g + saturation * (c as f32 - g))));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RgbImage {
        RgbImage::from_fn(24, 24, |x, y| Rgb([(x * 10) as u8, (y * 10) as u8, 128]))
    }

    #[test]
    fn seeded_and_size_preserving() {
        let policy = AugmentationPolicy::default();
        for seed in 0..20 {
            let a = policy.apply(&sample(), &mut SeededRng::new(seed));
            let b = policy.apply(&sample(), &mut SeededRng::new(seed));
            assert_eq!(a, b);
            assert_eq!(a.dimensions(), (24, 24));
        }
    }

    #[test]
    fn disabled_is_identity() {
        let img = sample();
        assert_eq!(AugmentationPolicy::disabled().apply(&img, &mut SeededRng::new(1)), img);
    }

    #[test]
    fn neutral_jitter_is_identity() {
        let img = sample();
        assert_eq!(color_jitter(&img, 1.0, 1.0, 1.0), img);
    }
}
