//! Identity-disjoint k-fold training of the temporal model. Every epoch
//! draws fresh crop/pad offsets, feature masks and dropout masks; validation
//! uses eval-mode standardization without masking.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{batch_tensor, mask_features, standardize_length, Mode, TemporalModel, TemporalModelConfig};
use crate::checkpoint::{EpochRecord, ModelCheckpoint, Provenance};
use crate::embeddings::{EmbeddingSequence, EmbeddingStore};
use crate::error::{Error, Result};
use crate::eval::mean_std;
use crate::manifest::{kfold_identity_splits, DatasetManifest, Split};
use crate::nn::{cross_entropy, Adam, PlateauScheduler};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_identities: Vec<String>,
    pub held_identities: Vec<String>,
    pub train_videos: usize,
    pub val_videos: usize,
    pub best_epoch: Option<usize>,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

pub struct TemporalFold {
    pub checkpoint: ModelCheckpoint,
    pub report: FoldReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: usize,
    pub val_accuracy_mean: f64,
    pub val_accuracy_std: f64,
    pub val_loss_mean: f64,
    pub val_loss_std: f64,
}

pub fn summarize_folds(reports: &[FoldReport]) -> CvSummary {
    let acc: Vec<f64> = reports.iter().map(|r| r.val_accuracy).collect();
    let loss: Vec<f64> = reports.iter().map(|r| r.val_loss).collect();
    let (val_accuracy_mean, val_accuracy_std) = mean_std(&acc);
    let (val_loss_mean, val_loss_std) = mean_std(&loss);
    CvSummary { folds: reports.len(), val_accuracy_mean, val_accuracy_std, val_loss_mean, val_loss_std }
}

fn stream_seed(seed: u64, tags: &[&str]) -> u64 {
    SeededRng::derive(seed, tags).below(u64::MAX)
}

/// Loads the train-partition sequences, labelled under the manifest's class
/// scheme. Fails listing every video without stored embeddings.
pub(crate) fn load_sequences(store: &EmbeddingStore, manifest: &DatasetManifest) -> Result<Vec<EmbeddingSequence>> {
    let missing = store.missing(manifest.records.iter().map(|r| r.video_id.as_str()));
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings(missing));
    }
    manifest
        .records
        .iter()
        .map(|r| {
            let mut seq = store.load(&r.video_id)?;
            seq.label = r.class_id(manifest.class_scheme);
            seq.identity_id = r.identity_id.clone();
            Ok(seq)
        })
        .collect()
}

fn evaluate(model: &TemporalModel, batches: &[(Tensor, Vec<u32>)], class_weights: Option<&[f32]>) -> Result<(f64, f64)> {
    let (mut loss_sum, mut correct, mut n) = (0.0, 0usize, 0usize);
    for (x, targets) in batches {
        let logits = model.forward(x, None)?;
        let loss = cross_entropy(&logits, targets, class_weights)?.to_scalar::<f32>()? as f64;
        loss_sum += loss * targets.len() as f64;
        let preds = logits.argmax(1)?.to_vec1::<u32>()?;
        correct += preds.iter().zip(targets).filter(|(p, t)| p == t).count();
        n += targets.len();
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

fn inverse_frequency(seqs: &[&EmbeddingSequence], classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; classes];
    for s in seqs {
        counts[s.label] += 1;
    }
    let n = seqs.len() as f32;
    counts.iter().map(|&c| if c == 0 { 1.0 } else { n / (classes as f32 * c as f32) }).collect()
}

fn train_fold(
    fold: usize,
    train: &[&EmbeddingSequence],
    val: &[&EmbeddingSequence],
    input_dim: usize,
    config: &TemporalModelConfig,
    manifest_hash: &str,
) -> Result<(TemporalModel, Provenance)> {
    let fold_tag = fold.to_string();
    let mut model = TemporalModel::build(config, input_dim, &mut SeededRng::derive(config.seed, &["temporal-init", &fold_tag]))?;
    let vars = model.store().trainable().into_iter().map(|(_, v)| v).collect();
    let mut optimizer = Adam::new(vars, config.learning_rate, config.weight_decay)?;
    let mut scheduler = config.lr_schedule.as_ref().map(|s| PlateauScheduler::new(s.factor, s.patience));
    let weights = config.class_weighted_loss.then(|| inverse_frequency(train, config.num_classes));

    let val_batches = val
        .chunks(config.batch_size)
        .map(|chunk| {
            let std = chunk
                .iter()
                .map(|s| standardize_length(s, config.target_length, Mode::Eval, 0))
                .collect::<Result<Vec<_>>>()?;
            let targets = chunk.iter().map(|s| s.label as u32).collect();
            Ok((batch_tensor(&std)?, targets))
        })
        .collect::<Result<Vec<_>>>()?;

    let mask_seed = stream_seed(config.seed, &["temporal", &fold_tag, "mask"]);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    let mut stale = 0usize;
    for epoch in 1..=config.max_epochs {
        let epoch_tag = epoch.to_string();
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::derive(config.seed, &["temporal", &fold_tag, "order", &epoch_tag]).shuffle(&mut order);
        let crop_seed = stream_seed(config.seed, &["temporal", &fold_tag, "crop", &epoch_tag]);
        let mut dropout_rng = SeededRng::derive(config.seed, &["temporal", &fold_tag, "dropout", &epoch_tag]);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let seqs = batch
                .iter()
                .map(|&i| {
                    let s = standardize_length(train[i], config.target_length, Mode::Train, crop_seed)?;
                    Ok(mask_features(&s, config.mask_fraction, mask_seed, epoch))
                })
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<u32> = batch.iter().map(|&i| train[i].label as u32).collect();
            let logits = model.forward(&batch_tensor(&seqs)?, Some(&mut dropout_rng))?;
            let loss = cross_entropy(&logits, &targets, weights.as_deref())?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::TrainingDiverged(format!("fold {fold}: non-finite training loss at epoch {epoch}")));
            }
            optimizer.step(&loss.backward()?)?;
            loss_sum += value * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_accuracy) = evaluate(&model, &val_batches, weights.as_deref())?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("fold {fold}: non-finite validation loss at epoch {epoch}")));
        }
        tracing::info!(fold, epoch, train_loss, val_loss, val_accuracy, "temporal model epoch");
        history.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });
        if let Some(s) = scheduler.as_mut() {
            s.observe(val_loss, &mut optimizer);
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.store().snapshot()?));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                tracing::info!(fold, epoch, "early stopping");
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
    let provenance = Provenance {
        train_manifest_hash: manifest_hash.into(),
        epochs_trained: history.len(),
        best_epoch,
        best_val_loss,
        init: format!("random:fold{fold}"),
        history,
        warnings: Vec::new(),
    };
    Ok((model, provenance))
}

/// Trains one model per identity-disjoint fold of the manifest's train
/// partition.
pub fn train_temporal_cv(
    store: &EmbeddingStore,
    manifest: &DatasetManifest,
    config: &TemporalModelConfig,
) -> Result<Vec<TemporalFold>> {
    config.validate()?;
    let train_part = manifest.partition(Split::Train);
    if config.num_classes != manifest.class_scheme.num_classes() {
        return Err(Error::Config(format!(
            "temporal model has {} classes but the manifest uses {}",
            config.num_classes,
            manifest.class_scheme.num_classes()
        )));
    }
    let seqs = load_sequences(store, &train_part)?;
    let input_dim = seqs.first().map(|s| s.dim()).ok_or_else(|| Error::EmptyDataset("no training videos".into()))?;
    if let Some(bad) = seqs.iter().find(|s| s.dim() != input_dim) {
        return Err(Error::Precondition(format!("video {} has {}-d embeddings, expected {input_dim}", bad.video_id, bad.dim())));
    }
    let manifest_hash = train_part.content_hash();
    let splits = kfold_identity_splits(&train_part, config.folds, config.seed)?;

    let mut folds = Vec::with_capacity(splits.len());
    for (fold, split) in splits.iter().enumerate() {
        let (train, val): (Vec<&EmbeddingSequence>, Vec<&EmbeddingSequence>) =
            seqs.iter().partition(|s| split.train_identities.contains(&s.identity_id));
        let (model, provenance) = train_fold(fold, &train, &val, input_dim, config, &manifest_hash)?;
        let last = provenance.best_epoch.map(|e| provenance.history[e - 1].clone());
        let report = FoldReport {
            fold,
            train_identities: split.train_identities.iter().cloned().collect(),
            held_identities: split.held_identities.iter().cloned().collect(),
            train_videos: train.len(),
            val_videos: val.len(),
            best_epoch: provenance.best_epoch,
            val_loss: last.as_ref().map_or(f64::NAN, |r| r.val_loss),
            val_accuracy: last.as_ref().map_or(f64::NAN, |r| r.val_accuracy),
            history: provenance.history.clone(),
        };
        folds.push(TemporalFold { checkpoint: model.to_checkpoint(provenance)?, report });
    }
    Ok(folds)
}
