//! Sequence classifier over per-video embedding matrices: length
//! standardization, per-video feature masking, a stacked bidirectional GRU
//! and a tapering fully connected head.

pub mod gru;
mod train;

use candle_core::{Device, Tensor};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointMeta, ModelCheckpoint, Provenance};
use crate::embeddings::{EmbeddingSequence, EmbeddingStore};
use crate::eval::{Prediction, PredictionSet};
use crate::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::nn::{self, softmax_rows, ParamStore};
use crate::rng::{round_half_up, SeededRng};

pub use gru::GruShape;
pub use train::{summarize_folds, train_temporal_cv, CvSummary, FoldReport, TemporalFold};

pub const ARCH: &str = "gru_temporal";

/// Reduce-on-plateau learning-rate schedule, off unless configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalModelConfig {
    pub gru_layers: usize,
    pub bidirectional: bool,
    pub hidden_dim: usize,
    pub fc_layers: usize,
    pub dropout: f64,
    pub target_length: usize,
    pub mask_fraction: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub num_classes: usize,
    /// Weight the loss by inverse class frequency of each fold's training set.
    pub class_weighted_loss: bool,
    pub lr_schedule: Option<PlateauSchedule>,
    pub seed: u64,
}

impl Default for TemporalModelConfig {
    fn default() -> Self {
        Self {
            gru_layers: 5,
            bidirectional: true,
            hidden_dim: 512,
            fc_layers: 4,
            dropout: 0.3,
            target_length: 50,
            mask_fraction: 0.10,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            early_stop_patience: 10,
            max_epochs: 100,
            batch_size: 32,
            folds: 5,
            num_classes: 2,
            class_weighted_loss: false,
            lr_schedule: None,
            seed: 0,
        }
    }
}

impl TemporalModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.gru_layers >= 1, "gru_layers must be at least 1"),
            (self.hidden_dim >= 1, "hidden_dim must be at least 1"),
            (self.fc_layers >= 1, "fc_layers must be at least 1"),
            ((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)"),
            ((0.0..1.0).contains(&self.mask_fraction), "mask_fraction must lie in [0, 1)"),
            (self.target_length >= 1, "target_length must be at least 1"),
            (self.num_classes >= 2, "num_classes must be at least 2"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.max_epochs >= 1, "max_epochs must be at least 1"),
            (self.folds >= 2, "folds must be at least 2"),
            (self.learning_rate > 0.0, "learning_rate must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    /// Widths of the fully connected stack, input first: the GRU output
    /// width halved per hidden layer (never below the class count), ending
    /// at `num_classes`.
    pub fn fc_widths(&self) -> Vec<usize> {
        let gru_out = self.hidden_dim * if self.bidirectional { 2 } else { 1 };
        let mut widths = vec![gru_out];
        for _ in 1..self.fc_layers {
            let prev = *widths.last().unwrap();
            widths.push((prev / 2).max(self.num_classes));
        }
        widths.push(self.num_classes);
        widths
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Crops or pads `seq` to exactly `target_length` rows.
///
/// Eval mode crops from the start and pads by repeating the last row. Train
/// mode crops a window at a random offset and splits the padding randomly
/// between repeats of the first row (before) and the last row (after). The
/// draw is keyed by `seed` and the video id.
pub fn standardize_length(seq: &EmbeddingSequence, target_length: usize, mode: Mode, seed: u64) -> Result<EmbeddingSequence> {
    let t = seq.len();
    if t == 0 {
        return Err(Error::EmptyInput(format!("video {} has no embeddings", seq.video_id)));
    }
    let mut rng = SeededRng::derive(seed, &["standardize", &seq.video_id]);
    let embeddings = if t == target_length {
        seq.embeddings.clone()
    } else if t > target_length {
        let offset = match mode {
            Mode::Eval => 0,
            Mode::Train => rng.below((t - target_length + 1) as u64) as usize,
        };
        seq.embeddings.slice(s![offset..offset + target_length, ..]).to_owned()
    } else {
        let deficit = target_length - t;
        let before = match mode {
            Mode::Eval => 0,
            Mode::Train => rng.below(deficit as u64 + 1) as usize,
        };
        Array2::from_shape_fn((target_length, seq.dim()), |(i, j)| {
            let src = i.saturating_sub(before).min(t - 1);
            seq.embeddings[[src, j]]
        })
    };
    Ok(EmbeddingSequence { embeddings, ..seq.clone_meta() })
}

/// Zeroes `round(mask_fraction * D)` feature columns across every row. The
/// column choice is keyed by `seed`, the video id and `epoch`.
pub fn mask_features(seq: &EmbeddingSequence, mask_fraction: f64, seed: u64, epoch: usize) -> EmbeddingSequence {
    let columns = masked_columns(&seq.video_id, seq.dim(), mask_fraction, seed, epoch);
    let mut embeddings = seq.embeddings.clone();
    for c in columns {
        embeddings.column_mut(c).fill(0.0);
    }
    EmbeddingSequence { embeddings, ..seq.clone_meta() }
}

pub fn masked_columns(video_id: &str, dim: usize, mask_fraction: f64, seed: u64, epoch: usize) -> Vec<usize> {
    let count = round_half_up(mask_fraction * dim as f64).min(dim);
    if count == 0 {
        return Vec::new();
    }
    let mut cols: Vec<usize> = (0..dim).collect();
    SeededRng::derive(seed, &["mask", video_id, &epoch.to_string()]).shuffle(&mut cols);
    cols.truncate(count);
    cols.sort_unstable();
    cols
}

impl EmbeddingSequence {
    fn clone_meta(&self) -> EmbeddingSequence {
        EmbeddingSequence {
            video_id: self.video_id.clone(),
            embeddings: Array2::zeros((0, 0)),
            label: self.label,
            identity_id: self.identity_id.clone(),
        }
    }
}

/// Stacks equal-length sequences into a `(B, T, D)` tensor.
pub fn batch_tensor(seqs: &[EmbeddingSequence]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::EmptyInput("empty sequence batch".into()))?;
    let (t, d) = first.embeddings.dim();
    let mut flat = Vec::with_capacity(seqs.len() * t * d);
    for s in seqs {
        if s.embeddings.dim() != (t, d) {
            return Err(Error::Precondition("sequences in a batch must share a shape".into()));
        }
        flat.extend(s.embeddings.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (seqs.len(), t, d), &Device::Cpu)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredConfig {
    model: TemporalModelConfig,
    input_dim: usize,
}

pub struct TemporalModel {
    pub config: TemporalModelConfig,
    pub input_dim: usize,
    store: ParamStore,
}

impl TemporalModel {
    pub fn build(config: &TemporalModelConfig, input_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        let mut store = ParamStore::new();
        gru::init(&mut store, "gru", Self::gru_shape(config, input_dim), rng)?;
        for (i, w) in config.fc_widths().windows(2).enumerate() {
            nn::init_linear(&mut store, &format!("fc.{i}"), w[0], w[1], rng)?;
        }
        Ok(Self { config: config.clone(), input_dim, store })
    }

    fn gru_shape(config: &TemporalModelConfig, input_dim: usize) -> GruShape {
        GruShape {
            input_dim,
            hidden_dim: config.hidden_dim,
            layers: config.gru_layers,
            bidirectional: config.bidirectional,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Logits for a `(B, T, input_dim)` batch. With `train` set, dropout is
    /// applied between GRU layers and between FC layers.
    pub fn forward(&self, x: &Tensor, mut train: Option<&mut SeededRng>) -> Result<Tensor> {
        let shape = Self::gru_shape(&self.config, self.input_dim);
        let p = self.config.dropout;
        let gru_dropout = train.as_deref_mut().map(|rng| (p, rng));
        let (_, finals) = gru::forward(x, &self.store, "gru", shape, gru_dropout)?;
        // final forward state and final backward state of the top layer
        let dirs = shape.directions();
        let top = finals.narrow(0, (shape.layers - 1) * dirs, dirs)?;
        let mut h = top.transpose(0, 1)?.contiguous()?.flatten_from(1)?;
        let n_fc = self.config.fc_widths().len() - 1;
        for i in 0..n_fc {
            if let Some(rng) = train.as_deref_mut() {
                h = nn::dropout(&h, p, rng)?;
            }
            h = nn::linear(&h, &self.store, &format!("fc.{i}"))?;
            if i + 1 < n_fc {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn to_checkpoint(&self, provenance: Provenance) -> Result<ModelCheckpoint> {
        let stored = StoredConfig { model: self.config.clone(), input_dim: self.input_dim };
        Ok(ModelCheckpoint {
            meta: CheckpointMeta {
                arch: ARCH.into(),
                config: serde_json::to_value(stored)?,
                freeze_map: self.store.freeze_map(),
                provenance,
            },
            tensors: self.store.snapshot()?,
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.meta.arch != ARCH {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {ARCH} checkpoint, found {}",
                ckpt.meta.arch
            )));
        }
        let stored: StoredConfig = ckpt.config()?;
        let mut model = Self::build(&stored.model, stored.input_dim, &mut SeededRng::new(0))?;
        model.store.load_from(&ckpt.tensors, |_| false)?;
        Ok(model)
    }

    /// Eval-mode class probabilities for each sequence.
    pub fn predict(&self, seqs: &[EmbeddingSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(self.config.batch_size) {
            let std: Vec<EmbeddingSequence> = chunk
                .iter()
                .map(|s| self.check_dim(s).and_then(|_| standardize_length(s, self.config.target_length, Mode::Eval, 0)))
                .collect::<Result<_>>()?;
            out.extend(softmax_rows(&self.forward(&batch_tensor(&std)?, None)?)?);
        }
        Ok(out)
    }

    fn check_dim(&self, seq: &EmbeddingSequence) -> Result<()> {
        if seq.dim() != self.input_dim {
            return Err(Error::Precondition(format!(
                "video {} has {}-d embeddings, model expects {}",
                seq.video_id,
                seq.dim(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

pub fn build_temporal_model(config: &TemporalModelConfig, input_dim: usize) -> Result<TemporalModel> {
    TemporalModel::build(config, input_dim, &mut SeededRng::derive(config.seed, &["temporal-init"]))
}

/// Eval-mode class probabilities of one video.
pub fn predict_video_temporal(model: &TemporalModel, seq: &EmbeddingSequence) -> Result<Vec<f64>> {
    Ok(model.predict(std::slice::from_ref(seq))?.remove(0))
}

/// Video-level predictions for every manifest video with stored embeddings
/// under the model's class count. Fails listing videos without embeddings.
pub fn predict_temporal_videos(
    model: &TemporalModel,
    store: &EmbeddingStore,
    manifest: &DatasetManifest,
) -> Result<PredictionSet> {
    let scheme = crate::frame::scheme_for(model.config.num_classes)?;
    let seqs = train::load_sequences(store, manifest)?;
    let probs = model.predict(&seqs)?;
    let predictions = manifest
        .records
        .iter()
        .zip(probs)
        .map(|(r, p)| Prediction::from_record(r, scheme, p))
        .collect();
    PredictionSet::new(scheme.class_names(), predictions)
}
