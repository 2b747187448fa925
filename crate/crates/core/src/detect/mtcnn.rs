//! Three-stage cascaded face detector (P-Net proposals, R-Net refinement,
//! O-Net output) with the publicly released weights. Pre- and
//! post-processing follow the widely used PyTorch port, including its
//! area-resampled image pyramid and box arithmetic, so boxes agree with that
//! implementation to within float rounding.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{Detection, FaceDetector};
use crate::error::{Error, Result};

static PACKAGED_WEIGHTS: &[u8] = include_bytes!("../../assets/mtcnn.safetensors");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtcnnConfig {
    pub min_face_size: f64,
    /// Score thresholds of the three stages.
    pub thresholds: [f32; 3],
    pub scale_factor: f64,
}

impl Default for MtcnnConfig {
    fn default() -> Self {
        Self { min_face_size: 20.0, thresholds: [0.6, 0.7, 0.7], scale_factor: 0.709 }
    }
}

/// The raw networks. Inputs are normalized `(x - 127.5) / 128` NCHW batches.
pub struct MtcnnNets {
    weights: HashMap<String, Tensor>,
}

fn conv(x: &Tensor, w: &HashMap<String, Tensor>, name: &str) -> Result<Tensor> {
    let weight = &w[&format!("{name}.weight")];
    let bias = &w[&format!("{name}.bias")];
    let y = x.conv2d(weight, 0, 1, 1, 1)?;
    Ok(y.broadcast_add(&bias.reshape((1, (), 1, 1))?)?)
}

fn linear(x: &Tensor, w: &HashMap<String, Tensor>, name: &str) -> Result<Tensor> {
    let weight = &w[&format!("{name}.weight")];
    let bias = &w[&format!("{name}.bias")];
    Ok(x.matmul(&weight.t()?)?.broadcast_add(bias)?)
}

fn prelu(x: &Tensor, w: &HashMap<String, Tensor>, name: &str) -> Result<Tensor> {
    let slope = &w[&format!("{name}.weight")];
    let slope = if x.rank() == 4 { slope.reshape((1, (), 1, 1))? } else { slope.reshape((1, ()))? };
    let neg = x.minimum(0f32)?.broadcast_mul(&slope)?;
    Ok((x.relu()? + neg)?)
}

/// Max pooling with PyTorch's `ceil_mode=True` output size.
fn max_pool_ceil(x: &Tensor, k: usize, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let out = |len: usize| {
        let mut o = (len.saturating_sub(k)).div_ceil(s) + 1;
        if (o - 1) * s >= len {
            o -= 1;
        }
        o
    };
    let (oh, ow) = (out(h), out(w));
    let pad_h = ((oh - 1) * s + k).saturating_sub(h);
    let pad_w = ((ow - 1) * s + k).saturating_sub(w);
    let mut x = x.clone();
    if pad_w > 0 {
        let fill = Tensor::full(f32::NEG_INFINITY, (n, c, h, pad_w), x.device())?;
        x = Tensor::cat(&[&x, &fill], 3)?;
    }
    if pad_h > 0 {
        let fill = Tensor::full(f32::NEG_INFINITY, (n, c, pad_h, w + pad_w), x.device())?;
        x = Tensor::cat(&[&x, &fill], 2)?;
    }
    Ok(x.max_pool2d_with_stride(k, s)?)
}

impl MtcnnNets {
    pub fn from_safetensors_bytes(bytes: &[u8]) -> Result<Self> {
        let weights = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        let weights = weights
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        for key in ["pnet.conv1.weight", "rnet.dense4.weight", "onet.dense6_3.bias"] {
            if !weights.contains_key(key) {
                return Err(Error::AssetMissing(format!("detector weights lack {key}")));
            }
        }
        Ok(Self { weights })
    }

    /// `(box regression (N,4,h,w), face probability (N,2,h,w))`.
    pub fn pnet(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = &self.weights;
        let x = prelu(&conv(x, w, "pnet.conv1")?, w, "pnet.prelu1")?;
        let x = max_pool_ceil(&x, 2, 2)?;
        let x = prelu(&conv(&x, w, "pnet.conv2")?, w, "pnet.prelu2")?;
        let x = prelu(&conv(&x, w, "pnet.conv3")?, w, "pnet.prelu3")?;
        let prob = candle_nn::ops::softmax(&conv(&x, w, "pnet.conv4_1")?, 1)?;
        Ok((conv(&x, w, "pnet.conv4_2")?, prob))
    }

    /// `(box regression (N,4), face probability (N,2))` for 24x24 crops.
    pub fn rnet(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = &self.weights;
        let x = max_pool_ceil(&prelu(&conv(x, w, "rnet.conv1")?, w, "rnet.prelu1")?, 3, 2)?;
        let x = max_pool_ceil(&prelu(&conv(&x, w, "rnet.conv2")?, w, "rnet.prelu2")?, 3, 2)?;
        let x = prelu(&conv(&x, w, "rnet.conv3")?, w, "rnet.prelu3")?;
        // the dense layer was trained on a (N, W, H, C) flattening
        let x = x.permute((0, 3, 2, 1))?.contiguous()?.flatten_from(1)?;
        let x = prelu(&linear(&x, w, "rnet.dense4")?, w, "rnet.prelu4")?;
        let prob = candle_nn::ops::softmax(&linear(&x, w, "rnet.dense5_1")?, D::Minus1)?;
        Ok((linear(&x, w, "rnet.dense5_2")?, prob))
    }

    /// `(box regression (N,4), face probability (N,2))` for 48x48 crops.
    pub fn onet(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = &self.weights;
        let x = max_pool_ceil(&prelu(&conv(x, w, "onet.conv1")?, w, "onet.prelu1")?, 3, 2)?;
        let x = max_pool_ceil(&prelu(&conv(&x, w, "onet.conv2")?, w, "onet.prelu2")?, 3, 2)?;
        let x = max_pool_ceil(&prelu(&conv(&x, w, "onet.conv3")?, w, "onet.prelu3")?, 2, 2)?;
        let x = prelu(&conv(&x, w, "onet.conv4")?, w, "onet.prelu4")?;
        let x = x.permute((0, 3, 2, 1))?.contiguous()?.flatten_from(1)?;
        let x = prelu(&linear(&x, w, "onet.dense5")?, w, "onet.prelu5")?;
        let prob = candle_nn::ops::softmax(&linear(&x, w, "onet.dense6_1")?, D::Minus1)?;
        Ok((linear(&x, w, "onet.dense6_2")?, prob))
    }
}

/// Planar float image, channel-major.
struct Planes {
    data: Vec<f32>,
    h: usize,
    w: usize,
}

impl Planes {
    fn from_rgb(image: &RgbImage) -> Self {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut data = vec![0f32; 3 * w * h];
        for (x, y, px) in image.enumerate_pixels() {
            for c in 0..3 {
                data[c * w * h + y as usize * w + x as usize] = px[c] as f32;
            }
        }
        Self { data, h, w }
    }

    /// Area resampling of the window rows `y0..y1`, cols `x0..x1` to `oh x ow`
    /// (adaptive average pooling), then normalized for the networks.
    fn resample(&self, (y0, y1, x0, x1): (usize, usize, usize, usize), oh: usize, ow: usize) -> Vec<f32> {
        let (ih, iw) = (y1 - y0, x1 - x0);
        let bounds = |o: usize, out: usize, len: usize| (o * len / out, ((o + 1) * len).div_ceil(out));
        let mut out = vec![0f32; 3 * oh * ow];
        let mut rows = vec![0f32; ih * ow];
        for c in 0..3 {
            let plane = &self.data[c * self.h * self.w..(c + 1) * self.h * self.w];
            for y in 0..ih {
                let row = &plane[(y0 + y) * self.w + x0..(y0 + y) * self.w + x1];
                for ox in 0..ow {
                    let (a, b) = bounds(ox, ow, iw);
                    rows[y * ow + ox] = row[a..b].iter().sum::<f32>() / (b - a) as f32;
                }
            }
            for oy in 0..oh {
                let (a, b) = bounds(oy, oh, ih);
                for ox in 0..ow {
                    let s: f32 = (a..b).map(|y| rows[y * ow + ox]).sum();
                    out[c * oh * ow + oy * ow + ox] = (s / (b - a) as f32 - 127.5) * 0.0078125;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    b: [f32; 4],
    score: f32,
    reg: [f32; 4],
}

fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let area = |r: &[f32; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (area(a) + area(b) - inter)
}

/// Greedy IoU suppression; returns survivors in descending score order.
fn nms(cands: Vec<Candidate>, threshold: f32) -> Vec<Candidate> {
    let mut order = cands;
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Candidate> = Vec::new();
    for c in order {
        if keep.iter().all(|k| iou(&k.b, &c.b) <= threshold) {
            keep.push(c);
        }
    }
    keep
}

/// Final suppression by intersection over the smaller box, with inclusive
/// pixel areas.
fn nms_min(cands: Vec<Candidate>, threshold: f32) -> Vec<Candidate> {
    let area = |r: &[f32; 4]| (r[2] - r[0] + 1.0) * (r[3] - r[1] + 1.0);
    let mut order = cands;
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Candidate> = Vec::new();
    for c in order {
        let suppressed = keep.iter().any(|k| {
            let iw = (k.b[2].min(c.b[2]) - k.b[0].max(c.b[0]) + 1.0).max(0.0);
            let ih = (k.b[3].min(c.b[3]) - k.b[1].max(c.b[1]) + 1.0).max(0.0);
            iw * ih / area(&k.b).min(area(&c.b)) > threshold
        });
        if !suppressed {
            keep.push(c);
        }
    }
    keep
}

/// Squares a box around its centre using the longer side.
fn rerec(b: [f32; 4]) -> [f32; 4] {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let l = w.max(h);
    let x1 = b[0] + w * 0.5 - l * 0.5;
    let y1 = b[1] + h * 0.5 - l * 0.5;
    [x1, y1, x1 + l, y1 + l]
}

fn bbreg(b: [f32; 4], reg: [f32; 4]) -> [f32; 4] {
    let w = b[2] - b[0] + 1.0;
    let h = b[3] - b[1] + 1.0;
    [b[0] + reg[0] * w, b[1] + reg[1] * h, b[2] + reg[2] * w, b[3] + reg[3] * h]
}

/// Integer crop window `(y0, y1, x0, x1)` clipped to the image, or `None`
/// when it is empty.
fn crop_window(b: &[f32; 4], w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let x = (b[0].trunc() as i64).max(1);
    let y = (b[1].trunc() as i64).max(1);
    let ex = (b[2].trunc() as i64).min(w as i64);
    let ey = (b[3].trunc() as i64).min(h as i64);
    (ey > y - 1 && ex > x - 1).then(|| ((y - 1) as usize, ey as usize, (x - 1) as usize, ex as usize))
}

pub struct Mtcnn {
    nets: MtcnnNets,
    config: MtcnnConfig,
}

impl Mtcnn {
    pub fn packaged(config: MtcnnConfig) -> Result<Self> {
        Ok(Self { nets: MtcnnNets::from_safetensors_bytes(PACKAGED_WEIGHTS)?, config })
    }

    pub fn nets(&self) -> &MtcnnNets {
        &self.nets
    }

    fn refine(
        &self,
        planes: &Planes,
        cands: Vec<Candidate>,
        size: usize,
        stage: usize,
    ) -> Result<Vec<Candidate>> {
        let mut batch = Vec::new();
        let mut kept = Vec::new();
        for c in cands {
            if let Some(win) = crop_window(&c.b, planes.w, planes.h) {
                batch.extend(planes.resample(win, size, size));
                kept.push(c);
            }
        }
        if kept.is_empty() {
            return Ok(kept);
        }
        let input = Tensor::from_vec(batch, (kept.len(), 3, size, size), &Device::Cpu)?;
        let (reg, prob) = if stage == 1 { self.nets.rnet(&input)? } else { self.nets.onet(&input)? };
        let reg = reg.to_vec2::<f32>()?;
        let prob = prob.to_vec2::<f32>()?;
        let threshold = self.config.thresholds[stage];
        Ok(kept
            .into_iter()
            .zip(reg.into_iter().zip(prob))
            .filter(|(_, (_, p))| p[1] > threshold)
            .map(|(c, (r, p))| Candidate { b: c.b, score: p[1], reg: [r[0], r[1], r[2], r[3]] })
            .collect())
    }
}

impl FaceDetector for Mtcnn {
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>> {
        let planes = Planes::from_rgb(image);
        let (h, w) = (planes.h, planes.w);
        let m = 12.0 / self.config.min_face_size;
        let mut minl = h.min(w) as f64 * m;
        let mut scales = Vec::new();
        let mut scale = m;
        while minl >= 12.0 {
            scales.push(scale);
            scale *= self.config.scale_factor;
            minl *= self.config.scale_factor;
        }

        let mut proposals = Vec::new();
        for &scale in &scales {
            let hs = (h as f64 * scale + 1.0) as usize;
            let ws = (w as f64 * scale + 1.0) as usize;
            let data = planes.resample((0, h, 0, w), hs, ws);
            let input = Tensor::from_vec(data, (1, 3, hs, ws), &Device::Cpu)?;
            let (reg, prob) = self.nets.pnet(&input)?;
            let reg = reg.squeeze(0)?.to_vec3::<f32>()?;
            let prob = prob.squeeze(0)?.get(1)?.to_vec2::<f32>()?;
            let s = scale as f32;
            let mut at_scale = Vec::new();
            for (y, row) in prob.iter().enumerate() {
                for (x, &p) in row.iter().enumerate() {
                    if p >= self.config.thresholds[0] {
                        let (fx, fy) = (x as f32, y as f32);
                        at_scale.push(Candidate {
                            b: [
                                ((2.0 * fx + 1.0) / s).floor(),
                                ((2.0 * fy + 1.0) / s).floor(),
                                ((2.0 * fx + 12.0) / s).floor(),
                                ((2.0 * fy + 12.0) / s).floor(),
                            ],
                            score: p,
                            reg: [reg[0][y][x], reg[1][y][x], reg[2][y][x], reg[3][y][x]],
                        });
                    }
                }
            }
            proposals.extend(nms(at_scale, 0.5));
        }

        // P-Net regressions are relative to the exclusive box size
        let proposals: Vec<Candidate> = nms(proposals, 0.7)
            .into_iter()
            .map(|c| {
                let (bw, bh) = (c.b[2] - c.b[0], c.b[3] - c.b[1]);
                let b = [c.b[0] + c.reg[0] * bw, c.b[1] + c.reg[1] * bh, c.b[2] + c.reg[2] * bw, c.b[3] + c.reg[3] * bh];
                Candidate { b: rerec(b), ..c }
            })
            .collect();

        let refined: Vec<Candidate> = nms(self.refine(&planes, proposals, 24, 1)?, 0.7)
            .into_iter()
            .map(|c| Candidate { b: rerec(bbreg(c.b, c.reg)), ..c })
            .collect();

        let output: Vec<Candidate> = self
            .refine(&planes, refined, 48, 2)?
            .into_iter()
            .map(|c| Candidate { b: bbreg(c.b, c.reg), ..c })
            .collect();
        Ok(nms_min(output, 0.7)
            .into_iter()
            .map(|c| Detection { bbox: c.b, confidence: c.score })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_mode_pool_shapes() {
        let x = Tensor::arange(0f32, 2.0 * 7.0 * 5.0, &Device::Cpu).unwrap().reshape((1, 2, 7, 5)).unwrap();
        let y = max_pool_ceil(&x, 3, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 3, 2]);
        let y = max_pool_ceil(&x, 2, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 3]);
        // the last partial window only sees real values
        let v = y.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(v[3][2], 34.0);
    }

    #[test]
    fn area_resample_averages_blocks() {
        let image = RgbImage::from_fn(4, 2, |x, _| image::Rgb([(x * 10) as u8, 0, 255]));
        let planes = Planes::from_rgb(&image);
        let out = planes.resample((0, 2, 0, 4), 1, 2);
        let denorm: Vec<f32> = out.iter().map(|v| v / 0.0078125 + 127.5).collect();
        assert_eq!(denorm, vec![5.0, 25.0, 0.0, 0.0, 255.0, 255.0]);
    }

    #[test]
    fn nms_keeps_best_of_overlapping() {
        let c = |b: [f32; 4], score| Candidate { b, score, reg: [0.0; 4] };
        let kept = nms(vec![c([0.0, 0.0, 10.0, 10.0], 0.8), c([1.0, 1.0, 11.0, 11.0], 0.9), c([20.0, 20.0, 30.0, 30.0], 0.5)], 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        let kept = nms_min(vec![c([0.0, 0.0, 10.0, 10.0], 0.8), c([2.0, 2.0, 6.0, 6.0], 0.9)], 0.7);
        assert_eq!(kept.len(), 1);
    }
}
