//! Identity-embedding baseline: an InceptionResnetV1 face recognizer
//! (VGGFace2-trained weights, facenet-pytorch layout) producing
//! L2-normalized 512-d embeddings per face crop. Inference only.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, D};
use image::{imageops, RgbImage};
use ndarray::Array2;

use crate::artifact::sha256_hex;
use crate::embeddings::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::extraction::FrameSet;
use crate::nn::{self, ParamStore};

pub const FACENET_WEIGHTS_ENV: &str = "DECAY_BENCH_FACENET_WEIGHTS";
pub const INPUT_SIZE: u32 = 160;
pub const EMBEDDING_DIM: usize = 512;
const BN_EPS: f64 = 1e-3;
const BATCH: usize = 8;

pub struct FaceNet {
    store: ParamStore,
    fingerprint: String,
}

impl FaceNet {
    /// Loads weights from `path`, or from `$DECAY_BENCH_FACENET_WEIGHTS`
    /// when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let path: PathBuf = match path {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(FACENET_WEIGHTS_ENV).map(PathBuf::from).ok_or_else(|| {
                Error::AssetMissing(format!("face recognizer weights: set {FACENET_WEIGHTS_ENV} or configure a path"))
            })?,
        };
        if !path.is_file() {
            return Err(Error::AssetMissing(format!("face recognizer weights not found at {}", path.display())));
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_safetensors_bytes(&bytes)
    }

    /// Accepts keys with or without a leading `model.`.
    pub fn from_safetensors_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        // when any key is prefixed, unprefixed keys are auxiliary tensors
        let prefixed = tensors.keys().any(|k| k.starts_with("model."));
        let mut store = ParamStore::new();
        for (key, t) in tensors {
            let name = match key.strip_prefix("model.") {
                Some(n) => n,
                None if prefixed => continue,
                None => key.as_str(),
            };
            if name.ends_with("num_batches_tracked") || name.starts_with("logits.") {
                continue;
            }
            if name.ends_with("running_mean") || name.ends_with("running_var") {
                store.insert_buffer(name, t.to_dtype(candle_core::DType::F32)?);
            } else {
                store.insert_param(name, &t)?;
            }
        }
        if !store.contains("last_linear.weight") {
            return Err(Error::IncompatibleCheckpoint("no last_linear.weight in face recognizer weights".into()));
        }
        Ok(Self { store, fingerprint: format!("facenet-{}", &sha256_hex(bytes)[..16]) })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Face crops are resized to 160 and scaled with `(x - 127.5) / 128`.
    pub fn preprocess(images: &[&RgbImage]) -> Result<Tensor> {
        let side = INPUT_SIZE;
        let plane = (side * side) as usize;
        let mut data = vec![0f32; images.len() * 3 * plane];
        for (i, img) in images.iter().enumerate() {
            let resized;
            let img = if img.dimensions() == (side, side) {
                *img
            } else {
                resized = imageops::resize(*img, side, side, imageops::FilterType::Triangle);
                &resized
            };
            for (j, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[i * 3 * plane + c * plane + j] = (px[c] as f32 - 127.5) / 128.0;
                }
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, side as usize, side as usize), &Device::Cpu)?)
    }

    fn basic(&self, x: &Tensor, name: &str, stride: usize, pad: (usize, usize)) -> Result<Tensor> {
        let w = self.store.param(&format!("{name}.conv.weight"))?;
        let x = if pad.0 == pad.1 {
            x.conv2d(&w, pad.0, stride, 1, 1)?
        } else {
            x.pad_with_zeros(2, pad.0, pad.0)?.pad_with_zeros(3, pad.1, pad.1)?.conv2d(&w, 0, stride, 1, 1)?
        };
        Ok(nn::batch_norm_eval(&x, &self.store, &format!("{name}.bn"), BN_EPS)?.relu()?)
    }

    fn chain(&self, x: &Tensor, prefix: &str, layers: &[(usize, (usize, usize))]) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, &(stride, pad)) in layers.iter().enumerate() {
            y = self.basic(&y, &format!("{prefix}.{i}"), stride, pad)?;
        }
        Ok(y)
    }

    fn residual(&self, x: &Tensor, p: &str, branches: Vec<Tensor>, scale: f64, relu: bool) -> Result<Tensor> {
        let cat = Tensor::cat(&branches, 1)?;
        let w = self.store.param(&format!("{p}.conv2d.weight"))?;
        let b = self.store.param(&format!("{p}.conv2d.bias"))?;
        let up = cat.conv2d(&w, 0, 1, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
        let out = ((up * scale)? + x)?;
        Ok(if relu { out.relu()? } else { out })
    }

    fn block35(&self, x: &Tensor, p: &str) -> Result<Tensor> {
        let b0 = self.basic(x, &format!("{p}.branch0"), 1, (0, 0))?;
        let b1 = self.chain(x, &format!("{p}.branch1"), &[(1, (0, 0)), (1, (1, 1))])?;
        let b2 = self.chain(x, &format!("{p}.branch2"), &[(1, (0, 0)), (1, (1, 1)), (1, (1, 1))])?;
        self.residual(x, p, vec![b0, b1, b2], 0.17, true)
    }

    fn block17(&self, x: &Tensor, p: &str) -> Result<Tensor> {
        let b0 = self.basic(x, &format!("{p}.branch0"), 1, (0, 0))?;
        let b1 = self.chain(x, &format!("{p}.branch1"), &[(1, (0, 0)), (1, (0, 3)), (1, (3, 0))])?;
        self.residual(x, p, vec![b0, b1], 0.10, true)
    }

    fn block8(&self, x: &Tensor, p: &str, scale: f64, relu: bool) -> Result<Tensor> {
        let b0 = self.basic(x, &format!("{p}.branch0"), 1, (0, 0))?;
        let b1 = self.chain(x, &format!("{p}.branch1"), &[(1, (0, 0)), (1, (0, 1)), (1, (1, 0))])?;
        self.residual(x, p, vec![b0, b1], scale, relu)
    }

    /// L2-normalized embeddings, `(N, 512)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.basic(x, "conv2d_1a", 2, (0, 0))?;
        let x = self.basic(&x, "conv2d_2a", 1, (0, 0))?;
        let x = self.basic(&x, "conv2d_2b", 1, (1, 1))?;
        let x = x.max_pool2d_with_stride(3, 2)?;
        let x = self.basic(&x, "conv2d_3b", 1, (0, 0))?;
        let x = self.basic(&x, "conv2d_4a", 1, (0, 0))?;
        let mut x = self.basic(&x, "conv2d_4b", 2, (0, 0))?;
        for i in 0..5 {
            x = self.block35(&x, &format!("repeat_1.{i}"))?;
        }
        let x6 = Tensor::cat(
            &[
                self.basic(&x, "mixed_6a.branch0", 2, (0, 0))?,
                self.chain(&x, "mixed_6a.branch1", &[(1, (0, 0)), (1, (1, 1)), (2, (0, 0))])?,
                x.max_pool2d_with_stride(3, 2)?,
            ],
            1,
        )?;
        let mut x = x6;
        for i in 0..10 {
            x = self.block17(&x, &format!("repeat_2.{i}"))?;
        }
        let x7 = Tensor::cat(
            &[
                self.chain(&x, "mixed_7a.branch0", &[(1, (0, 0)), (2, (0, 0))])?,
                self.chain(&x, "mixed_7a.branch1", &[(1, (0, 0)), (2, (0, 0))])?,
                self.chain(&x, "mixed_7a.branch2", &[(1, (0, 0)), (1, (1, 1)), (2, (0, 0))])?,
                x.max_pool2d_with_stride(3, 2)?,
            ],
            1,
        )?;
        let mut x = x7;
        for i in 0..5 {
            x = self.block8(&x, &format!("repeat_3.{i}"), 0.20, true)?;
        }
        let x = self.block8(&x, "block8", 1.0, false)?;
        let pooled = x.flatten_from(2)?.mean(2)?;
        let emb = nn::linear(&pooled, &self.store, "last_linear")?;
        let emb = nn::batch_norm_eval(&emb, &self.store, "last_bn", BN_EPS)?;
        let norm = emb.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
        Ok(emb.broadcast_div(&norm)?)
    }

    pub fn embed_images(&self, images: &[&RgbImage]) -> Result<Array2<f32>> {
        let mut flat = Vec::with_capacity(images.len() * EMBEDDING_DIM);
        for chunk in images.chunks(BATCH) {
            let emb = self.forward(&Self::preprocess(chunk)?)?;
            flat.extend(emb.flatten_all()?.to_vec1::<f32>()?);
        }
        Array2::from_shape_vec((images.len(), EMBEDDING_DIM), flat).map_err(|e| Error::Precondition(e.to_string()))
    }
}

/// Per-frame identity embeddings of one video, rows in timestamp order.
pub fn extract_baseline_embeddings(
    model: &FaceNet,
    frames: &FrameSet,
    label: usize,
    identity_id: &str,
) -> Result<EmbeddingSequence> {
    if frames.is_empty() {
        return Err(Error::Precondition(format!("video {} has no frames to embed", frames.video_id)));
    }
    let images: Vec<&RgbImage> = frames.images().collect();
    Ok(EmbeddingSequence {
        video_id: frames.video_id.clone(),
        embeddings: model.embed_images(&images)?,
        label,
        identity_id: identity_id.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_weights_are_reported() {
        let err = FaceNet::load(Some(Path::new("/nonexistent/facenet.safetensors"))).err().unwrap();
        assert!(matches!(err, Error::AssetMissing(_)));
    }

    #[test]
    fn preprocessing_scale() {
        let img = RgbImage::from_pixel(INPUT_SIZE, INPUT_SIZE, image::Rgb([255, 0, 128]));
        let t = FaceNet::preprocess(&[&img]).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let plane = (INPUT_SIZE * INPUT_SIZE) as usize;
        assert!((v[0] - 127.5 / 128.0).abs() < 1e-6);
        assert!((v[plane] + 127.5 / 128.0).abs() < 1e-6);
        assert!((v[2 * plane] - 0.5 / 128.0).abs() < 1e-6);
    }
}
