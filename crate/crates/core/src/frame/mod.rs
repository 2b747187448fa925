//! Stage one: a per-frame ResNet classifier, its video-level aggregation
//! and penultimate-layer embeddings; plus the identity-embedding baseline.

pub mod augment;
pub mod baseline;
pub mod resnet;
pub mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{imageops, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use augment::AugmentationPolicy;
pub use train::{train_frame_model, train_model, FrameTrainData, TrainReport};

use crate::checkpoint::{CheckpointMeta, ModelCheckpoint, Provenance};
use crate::embeddings::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::eval::{Prediction, PredictionSet};
use crate::extraction::{FrameIndex, FrameSet};
use crate::manifest::{ClassScheme, DatasetManifest};
use crate::nn::{softmax_rows, BufferUpdates, ParamStore};
use crate::rng::SeededRng;

pub const ARCH: &str = "resnet50";
pub const IMAGENET_WEIGHTS_ENV: &str = "DECAY_BENCH_IMAGENET_WEIGHTS";
const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];
const INFERENCE_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// torchvision ResNet-50 weights in safetensors form, from `weights` or
    /// the `DECAY_BENCH_IMAGENET_WEIGHTS` environment variable.
    ImagenetPretrained {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
    Checkpoint { path: PathBuf },
    /// Seeded He initialization.
    Random,
}

impl Default for Init {
    fn default() -> Self {
        Init::ImagenetPretrained { weights: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameModelConfig {
    pub backbone: Backbone,
    /// Channels of the first stage; 64 is the standard network.
    pub width: usize,
    /// Side length crops are resized to before entering the network.
    pub input_size: u32,
    pub init: Init,
    /// Residual stages (1-4) whose parameters stay fixed. Freezing stage 1
    /// also freezes the stem convolution and its batch norm.
    pub frozen_blocks: BTreeSet<u8>,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FrameModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Resnet50,
            width: 64,
            input_size: 224,
            init: Init::default(),
            frozen_blocks: [1, 2].into(),
            num_classes: 2,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            early_stop_patience: 10,
            max_epochs: 100,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl FrameModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.frozen_blocks.iter().any(|b| !(1..=4).contains(b)) {
            return Err(Error::Config(format!("frozen_blocks must be a subset of 1..=4, got {:?}", self.frozen_blocks)));
        }
        if self.width == 0 || self.input_size < 32 || self.batch_size == 0 {
            return Err(Error::Config("width and batch_size must be positive and input_size at least 32".into()));
        }
        Ok(())
    }

    fn is_frozen(&self, block: usize) -> bool {
        match block {
            0 => self.frozen_blocks.contains(&1),
            1..=4 => self.frozen_blocks.contains(&(block as u8)),
            _ => false,
        }
    }
}

pub struct FrameModel {
    pub config: FrameModelConfig,
    store: ParamStore,
    /// Non-fatal notes from construction, e.g. a reinitialized head.
    pub warnings: Vec<String>,
    /// Where the weights came from.
    pub init_description: String,
}

fn load_checkpoint_for_init(path: &std::path::Path) -> Result<(ModelCheckpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = crate::artifact::sha256_hex(&bytes);
    Ok((ModelCheckpoint::from_bytes(&bytes)?, hash))
}

fn head_classes(tensors: &BTreeMap<String, Tensor>) -> Option<usize> {
    tensors.get("fc.weight").and_then(|t| t.dims().first().copied())
}

impl FrameModel {
    /// Builds the network, loads the configured initialization and applies
    /// the freeze map. A head with a different class count is reinitialized.
    pub fn build(config: &FrameModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(config.seed, &["frame-model", "init"]);
        let mut store = resnet::init(config.width, config.num_classes, &mut rng)?;
        let mut warnings = Vec::new();
        let init_description = match &config.init {
            Init::Random => format!("random:{}", config.seed),
            Init::Checkpoint { path } => {
                let (ckpt, hash) = load_checkpoint_for_init(path)?;
                if ckpt.meta.arch != ARCH {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "{} holds a {} model, expected {ARCH}",
                        path.display(),
                        ckpt.meta.arch
                    )));
                }
                let theirs: FrameModelConfig = ckpt.config()?;
                if theirs.width != config.width {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "{} has base width {}, requested {}",
                        path.display(),
                        theirs.width,
                        config.width
                    )));
                }
                let classes = head_classes(&ckpt.tensors);
                let swap = classes != Some(config.num_classes);
                store.load_from(&ckpt.tensors, |name| swap && name.starts_with("fc."))?;
                if swap {
                    warnings.push(format!(
                        "head reinitialized: checkpoint has {} classes, requested {}",
                        classes.unwrap_or(0),
                        config.num_classes
                    ));
                }
                format!("checkpoint:{hash}")
            }
            Init::ImagenetPretrained { weights } => {
                let path = weights
                    .clone()
                    .or_else(|| std::env::var_os(IMAGENET_WEIGHTS_ENV).map(PathBuf::from))
                    .filter(|p| p.exists())
                    .ok_or_else(|| {
                        Error::AssetMissing(format!(
                            "ImageNet ResNet-50 weights: set init.weights or {IMAGENET_WEIGHTS_ENV} to a \
                             torchvision state dict saved as safetensors"
                        ))
                    })?;
                if config.width != 64 {
                    return Err(Error::IncompatibleCheckpoint("ImageNet weights require width 64".into()));
                }
                let tensors: BTreeMap<String, Tensor> =
                    candle_core::safetensors::load(&path, &Device::Cpu)?.into_iter().collect();
                let swap = head_classes(&tensors) != Some(config.num_classes);
                store.load_from(&tensors, |name| swap && name.starts_with("fc."))?;
                format!("imagenet:{}", crate::artifact::sha256_file(&path)?)
            }
        };
        let mut model = Self { config: config.clone(), store, warnings, init_description };
        model.apply_freeze();
        for w in &model.warnings {
            tracing::warn!(warning = %w, "frame model construction");
        }
        Ok(model)
    }

    /// Restores a trained model exactly as saved.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.meta.arch != ARCH {
            return Err(Error::IncompatibleCheckpoint(format!("expected {ARCH}, got {}", ckpt.meta.arch)));
        }
        let config: FrameModelConfig = ckpt.config()?;
        let num_classes = head_classes(&ckpt.tensors).unwrap_or(config.num_classes);
        let mut store = resnet::init(config.width, num_classes, &mut SeededRng::new(0))?;
        store.load_from(&ckpt.tensors, |_| false)?;
        for (name, frozen) in &ckpt.meta.freeze_map {
            store.set_frozen(name, *frozen);
        }
        Ok(Self {
            config: FrameModelConfig { num_classes, ..config },
            store,
            warnings: Vec::new(),
            init_description: ckpt.meta.provenance.init.clone(),
        })
    }

    fn apply_freeze(&mut self) {
        let names: Vec<String> = self.store.param_names().cloned().collect();
        for name in names {
            let frozen = self.config.is_frozen(resnet::block_of(&name));
            self.store.set_frozen(&name, frozen);
        }
    }

    /// Replaces the frozen stage set and recomputes the freeze map.
    pub fn set_frozen_blocks(&mut self, blocks: BTreeSet<u8>) {
        self.config.frozen_blocks = blocks;
        self.apply_freeze();
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedding_dim(&self) -> usize {
        resnet::embedding_dim(self.config.width)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn to_checkpoint(&self, provenance: Provenance) -> Result<ModelCheckpoint> {
        Ok(ModelCheckpoint {
            meta: CheckpointMeta {
                arch: ARCH.into(),
                config: serde_json::to_value(&self.config)?,
                freeze_map: self.store.freeze_map(),
                provenance,
            },
            tensors: self.store.snapshot()?,
        })
    }

    /// Resized, normalized NCHW batch.
    pub fn preprocess(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let side = self.config.input_size;
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
            let base = i * 3 * plane;
            for (j, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[base + c * plane + j] = (px[c] as f32 / 255.0 - MEAN[c]) / STD[c];
                }
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, side as usize, side as usize), &Device::Cpu)?)
    }

    /// Inference pass: `(features, logits)`.
    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut pass = resnet::Pass::eval(&self.store);
        let feats = pass.features(x)?;
        let logits = pass.head(&feats)?;
        Ok((feats, logits))
    }

    /// Training pass: trainable stages use batch statistics, frozen stages
    /// their running statistics. Returns logits and running-stat updates.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BufferUpdates)> {
        let mut batch_stats = [false; 5];
        for (block, flag) in batch_stats.iter_mut().enumerate() {
            *flag = !self.config.is_frozen(block);
        }
        let mut pass = resnet::Pass { store: &self.store, batch_stats, updates: Vec::new() };
        let feats = pass.features(x)?;
        let logits = pass.head(&feats)?;
        Ok((logits, pass.updates))
    }

    fn run_batches<T>(&self, images: &[&RgbImage], mut f: impl FnMut(Tensor, Tensor) -> Result<Vec<T>>) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_BATCH) {
            let (feats, logits) = self.forward_eval(&self.preprocess(chunk)?)?;
            out.extend(f(feats, logits)?);
        }
        Ok(out)
    }

    /// Per-image class probabilities, `N x C`.
    pub fn predict_images(&self, images: &[&RgbImage]) -> Result<Array2<f64>> {
        let rows = self.run_batches(images, |_, logits| softmax_rows(&logits))?;
        to_array(rows, self.num_classes())
    }

    /// Per-image penultimate features, `N x embedding_dim`.
    pub fn embed_images(&self, images: &[&RgbImage]) -> Result<Array2<f32>> {
        let rows = self.run_batches(images, |feats, _| Ok(feats.to_vec2::<f32>()?))?;
        to_array(rows, self.embedding_dim())
    }
}

fn to_array<T: Clone>(rows: Vec<Vec<T>>, cols: usize) -> Result<Array2<T>> {
    let n = rows.len();
    let flat: Vec<T> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, cols), flat).map_err(|e| Error::Precondition(e.to_string()))
}

pub fn build_frame_model(config: &FrameModelConfig) -> Result<FrameModel> {
    FrameModel::build(config)
}

/// Softmax probabilities of every frame, in frame order. No augmentation.
pub fn predict_frames(model: &FrameModel, frames: &FrameSet) -> Result<Array2<f64>> {
    if frames.is_empty() {
        return Err(Error::Precondition(format!("video {} has no frames to classify", frames.video_id)));
    }
    let images: Vec<&RgbImage> = frames.images().collect();
    model.predict_images(&images)
}

/// Column-wise mean of per-frame probability vectors.
pub fn aggregate_video(frame_probs: &Array2<f64>) -> Result<Vec<f64>> {
    let t = frame_probs.nrows();
    if t == 0 {
        return Err(Error::EmptyInput("no frame probabilities to aggregate".into()));
    }
    Ok(frame_probs.columns().into_iter().map(|c| c.iter().sum::<f64>() / t as f64).collect())
}

/// Video-level predictions (mean frame softmax) for every video in `index`
/// that the manifest lists, with classes matching the model's head.
pub fn predict_videos(
    model: &FrameModel,
    index: &FrameIndex,
    manifest: &DatasetManifest,
    cache_root: &Path,
) -> Result<PredictionSet> {
    let scheme = scheme_for(model.num_classes())?;
    let mut predictions = Vec::new();
    for video_id in index.video_ids() {
        let Some(record) = manifest.get(&video_id) else { continue };
        let frames = index.frame_set(cache_root, &video_id)?;
        let probs = aggregate_video(&predict_frames(model, &frames)?)?;
        predictions.push(Prediction::from_record(record, scheme, probs));
    }
    PredictionSet::new(scheme.class_names(), predictions)
}

/// Class scheme implied by a head size.
pub fn scheme_for(num_classes: usize) -> Result<ClassScheme> {
    ClassScheme::ALL
        .iter()
        .copied()
        .find(|s| s.num_classes() == num_classes)
        .ok_or_else(|| Error::Config(format!("no class scheme has {num_classes} classes")))
}

pub fn extract_embeddings(model: &FrameModel, frames: &FrameSet, label: usize, identity_id: &str) -> Result<EmbeddingSequence> {
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
    use ndarray::array;

    #[test]
    fn aggregation_examples() {
        let probs = array![[0.2, 0.8], [0.4, 0.6]];
        let agg = aggregate_video(&probs).unwrap();
        assert!((agg[0] - 0.3).abs() < 1e-15 && (agg[1] - 0.7).abs() < 1e-15);
        assert_eq!(aggregate_video(&array![[0.9, 0.1]]).unwrap(), vec![0.9, 0.1]);
        let p = [0.25, 0.75];
        let same = Array2::from_shape_fn((50, 2), |(_, j)| p[j]);
        assert_eq!(aggregate_video(&same).unwrap(), p.to_vec());
        assert!(matches!(aggregate_video(&Array2::zeros((0, 2))), Err(Error::EmptyInput(_))));
    }

    fn tiny() -> FrameModelConfig {
        FrameModelConfig { width: 2, input_size: 32, init: Init::Random, ..Default::default() }
    }

    #[test]
    fn freeze_map_excludes_frozen_stages() {
        let model = FrameModel::build(&tiny()).unwrap();
        let map = model.store().freeze_map();
        assert!(map["conv1.weight"] && map["layer1.0.conv1.weight"] && map["layer2.3.bn3.bias"]);
        assert!(!map["layer3.0.conv1.weight"] && !map["layer4.2.bn3.weight"] && !map["fc.weight"]);
        let trainable: Vec<String> = model.store().trainable().into_iter().map(|(k, _)| k).collect();
        assert!(trainable.iter().all(|k| !k.starts_with("layer1") && !k.starts_with("layer2")));
    }

    #[test]
    fn checkpoint_init_swaps_head_and_rejects_other_architectures() {
        let dir = tempfile::tempdir().unwrap();
        let base = FrameModel::build(&tiny()).unwrap();
        let path = dir.path().join("base.safetensors");
        base.to_checkpoint(Provenance::default()).unwrap().save(&path).unwrap();

        let cfg = FrameModelConfig { num_classes: 4, init: Init::Checkpoint { path: path.clone() }, ..tiny() };
        let swapped = FrameModel::build(&cfg).unwrap();
        assert_eq!(swapped.warnings.len(), 1);
        let a = swapped.store().param("layer3.1.conv2.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = base.store().param("layer3.1.conv2.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert_eq!(swapped.store().param("fc.weight").unwrap().dims(), &[4, 64]);

        let mut other = base.to_checkpoint(Provenance::default()).unwrap();
        other.meta.arch = "gru-classifier".into();
        let other_path = dir.path().join("other.safetensors");
        other.save(&other_path).unwrap();
        let cfg = FrameModelConfig { init: Init::Checkpoint { path: other_path }, ..tiny() };
        assert!(matches!(FrameModel::build(&cfg), Err(Error::IncompatibleCheckpoint(_))));
        let cfg = FrameModelConfig { width: 4, init: Init::Checkpoint { path }, ..tiny() };
        assert!(matches!(FrameModel::build(&cfg), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn missing_imagenet_weights_is_asset_missing() {
        let cfg = FrameModelConfig {
            width: 64,
            init: Init::ImagenetPretrained { weights: Some("/nonexistent/resnet50.safetensors".into()) },
            ..Default::default()
        };
        assert!(matches!(FrameModel::build(&cfg), Err(Error::AssetMissing(_))));
    }
}
