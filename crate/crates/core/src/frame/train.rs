//! Frame-level training: Adam on cross-entropy, augmentation on training
//! frames only, early stopping on validation loss with the best epoch's
//! weights restored.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use image::{imageops, RgbImage};
use rayon::prelude::*;

use super::{AugmentationPolicy, FrameModel, FrameModelConfig};
use crate::checkpoint::{EpochRecord, ModelCheckpoint, Provenance};
use crate::error::{Error, Result};
use crate::extraction::FrameIndex;
use crate::nn::{cross_entropy, Adam};
use crate::rng::SeededRng;

/// Decoded images above this many bytes are read from disk per batch
/// instead of being held in memory.
const PRELOAD_BUDGET: usize = 1 << 30;

pub struct FrameTrainData<'a> {
    pub train: &'a FrameIndex,
    pub val: &'a FrameIndex,
    pub cache_root: &'a Path,
    pub train_manifest_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub provenance: Provenance,
}

enum Images<'a> {
    Memory(Vec<RgbImage>),
    Disk { index: &'a FrameIndex, root: &'a Path, side: u32 },
}

fn load_one(root: &Path, rel: &Path, side: u32) -> Result<RgbImage> {
    let img = image::open(root.join(rel))?.to_rgb8();
    Ok(if img.dimensions() == (side, side) {
        img
    } else {
        imageops::resize(&img, side, side, imageops::FilterType::Triangle)
    })
}

impl<'a> Images<'a> {
    fn new(index: &'a FrameIndex, root: &'a Path, side: u32) -> Result<Self> {
        let bytes = index.frames.len() * (side * side * 3) as usize;
        if bytes > PRELOAD_BUDGET {
            return Ok(Images::Disk { index, root, side });
        }
        let images = index
            .frames
            .par_iter()
            .map(|f| load_one(root, &f.path, side))
            .collect::<Result<Vec<_>>>()?;
        Ok(Images::Memory(images))
    }

    fn get(&self, i: usize) -> Result<std::borrow::Cow<'_, RgbImage>> {
        match self {
            Images::Memory(v) => Ok(std::borrow::Cow::Borrowed(&v[i])),
            Images::Disk { index, root, side } => Ok(std::borrow::Cow::Owned(load_one(root, &index.frames[i].path, *side)?)),
        }
    }
}

fn check_disjoint(train: &FrameIndex, val: &FrameIndex) -> Result<()> {
    let shared: Vec<String> = train.identities().intersection(&val.identities()).cloned().collect();
    if !shared.is_empty() {
        return Err(Error::IdentityLeak(shared));
    }
    if train.frames.is_empty() {
        return Err(Error::EmptyDataset("training index has no frames".into()));
    }
    if val.frames.is_empty() {
        return Err(Error::EmptyDataset("validation index has no frames".into()));
    }
    Ok(())
}

/// Mean cross-entropy and accuracy of `model` over an index, in eval mode.
fn evaluate_index(model: &FrameModel, index: &FrameIndex, images: &Images<'_>) -> Result<(f64, f64)> {
    let n = index.frames.len();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let bs = model.config.batch_size;
    for start in (0..n).step_by(bs) {
        let ids: Vec<usize> = (start..(start + bs).min(n)).collect();
        let imgs = ids.iter().map(|&i| images.get(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&RgbImage> = imgs.iter().map(|c| c.as_ref()).collect();
        let targets: Vec<u32> = ids.iter().map(|&i| index.class_of(&index.frames[i]) as u32).collect();
        let (_, logits) = model.forward_eval(&model.preprocess(&refs)?)?;
        let loss = cross_entropy(&logits, &targets, None)?.to_scalar::<f32>()? as f64;
        loss_sum += loss * ids.len() as f64;
        let preds = logits.argmax(1)?.to_vec1::<u32>()?;
        correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Trains `model` in place with its own config's optimizer settings.
pub fn train_model(model: &mut FrameModel, data: &FrameTrainData<'_>, augmentation: &AugmentationPolicy) -> Result<TrainReport> {
    check_disjoint(data.train, data.val)?;
    augmentation.validate()?;
    let cfg = model.config.clone();
    let side = cfg.input_size;
    let train_images = Images::new(data.train, data.cache_root, side)?;
    let val_images = Images::new(data.val, data.cache_root, side)?;
    let targets: Vec<u32> = data.train.frames.iter().map(|f| data.train.class_of(f) as u32).collect();
    if let Some(bad) = targets.iter().find(|&&t| t as usize >= cfg.num_classes) {
        return Err(Error::Config(format!("class id {bad} out of range for a {}-class model", cfg.num_classes)));
    }

    let vars = model.store().trainable().into_iter().map(|(_, v)| v).collect();
    let mut optimizer = Adam::new(vars, cfg.learning_rate, cfg.weight_decay)?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    let mut stale = 0usize;
    let n = targets.len();

    for epoch in 1..=cfg.max_epochs {
        let epoch_tag = epoch.to_string();
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::derive(cfg.seed, &["frame-train", "order", &epoch_tag]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = SeededRng::derive(
                    cfg.seed,
                    &["augment", &augmentation.seed.to_string(), &epoch_tag, &i.to_string()],
                );
                imgs.push(augmentation.apply(train_images.get(i)?.as_ref(), &mut rng));
            }
            let refs: Vec<&RgbImage> = imgs.iter().collect();
            let batch_targets: Vec<u32> = batch.iter().map(|&i| targets[i]).collect();
            let (logits, updates) = model.forward_train(&model.preprocess(&refs)?)?;
            let loss = cross_entropy(&logits, &batch_targets, None)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::TrainingDiverged(format!("non-finite training loss at epoch {epoch}")));
            }
            optimizer.step(&loss.backward()?)?;
            model.store_mut().apply_updates(updates);
            loss_sum += value * batch.len() as f64;
        }
        let train_loss = loss_sum / n as f64;
        let (val_loss, val_accuracy) = evaluate_index(model, data.val, &val_images)?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        tracing::info!(epoch, train_loss, val_loss, val_accuracy, "frame model epoch");
        history.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.store().snapshot()?));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                tracing::info!(epoch, "early stopping");
                break;
            }
        }
    }

    let (best_val_loss, best_epoch) = match &best {
        Some((loss, epoch, snapshot)) => {
            model.store_mut().restore(snapshot)?;
            (Some(*loss), Some(*epoch))
        }
        None => (None, None),
    };
    Ok(TrainReport {
        provenance: Provenance {
            train_manifest_hash: data.train_manifest_hash.clone(),
            epochs_trained: history.len(),
            best_epoch,
            best_val_loss,
            init: model.init_description.clone(),
            history,
            warnings: model.warnings.clone(),
        },
    })
}

/// Builds a model from `config`, trains it and returns the best checkpoint.
pub fn train_frame_model(
    data: &FrameTrainData<'_>,
    config: &FrameModelConfig,
    augmentation: &AugmentationPolicy,
) -> Result<ModelCheckpoint> {
    check_disjoint(data.train, data.val)?;
    let mut model = FrameModel::build(config)?;
    let report = train_model(&mut model, data, augmentation)?;
    model.to_checkpoint(report.provenance)
}
