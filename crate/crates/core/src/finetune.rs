//! Adapting a frame model to a newer dataset with only the last residual
//! stage and the head trainable, swept over initializations, identity
//! budgets and seeds.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::write_json_atomic;
use crate::error::{Error, Result};
use crate::eval::{evaluate_predictions, ModelMetrics};
use crate::extraction::FrameIndex;
use crate::frame::{predict_videos, train_model, AugmentationPolicy, FrameModel, FrameModelConfig, FrameTrainData, Init};
use crate::manifest::{split_identities, subset_by_identity_fraction, ClassScheme, DatasetManifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    #[default]
    Block4AndHead,
}

impl TrainableScope {
    pub fn frozen_blocks(self) -> BTreeSet<u8> {
        match self {
            TrainableScope::Block4AndHead => [1, 2, 3].into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedInit {
    pub name: String,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetunePlan {
    pub inits: Vec<NamedInit>,
    pub trainable_scope: TrainableScope,
    pub learning_rate: f64,
    pub identity_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Share of each subset's identities held out for early stopping.
    pub val_fraction: f64,
    /// Train and score on real/fake labels; otherwise on technique classes.
    pub binary: bool,
    /// Init evaluated without any training; defaults to the first
    /// checkpoint init, else the first init.
    pub zero_shot_base: Option<String>,
    /// Epoch budget and early-stopping patience; the recipe's when unset.
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    /// Everything not overridden by the plan: architecture, batch size,
    /// epochs, patience, weight decay.
    pub recipe: FrameModelConfig,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        Self {
            inits: vec![NamedInit { name: "imagenet".into(), init: Init::default() }],
            trainable_scope: TrainableScope::Block4AndHead,
            learning_rate: 2e-5,
            identity_fractions: vec![0.1, 0.2, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            val_fraction: 0.15,
            binary: true,
            zero_shot_base: None,
            max_epochs: None,
            early_stop_patience: None,
            recipe: FrameModelConfig::default(),
        }
    }
}

impl FinetunePlan {
    pub fn validate(&self) -> Result<()> {
        if self.inits.is_empty() || self.seeds.is_empty() || self.identity_fractions.is_empty() {
            return Err(Error::Config("a sweep needs at least one init, fraction and seed".into()));
        }
        if self.identity_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("identity fractions must lie in (0, 1]".into()));
        }
        if self.identity_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("identity fractions must be strictly ascending".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let names: BTreeSet<&str> = self.inits.iter().map(|i| i.name.as_str()).collect();
        if names.len() != self.inits.len() {
            return Err(Error::Config("init names must be unique".into()));
        }
        if let Some(base) = &self.zero_shot_base {
            if !names.contains(base.as_str()) {
                return Err(Error::Config(format!("zero_shot_base {base} is not one of the inits")));
            }
        }
        Ok(())
    }

    pub fn scheme(&self) -> ClassScheme {
        if self.binary {
            ClassScheme::Binary
        } else {
            ClassScheme::Multiclass
        }
    }

    /// Model config of one cell: the recipe with this plan's learning rate,
    /// freeze scope, class count and the cell's init and seed.
    pub fn cell_config(&self, init: &Init, seed: u64) -> FrameModelConfig {
        FrameModelConfig {
            init: init.clone(),
            learning_rate: self.learning_rate,
            frozen_blocks: self.trainable_scope.frozen_blocks(),
            num_classes: self.scheme().num_classes(),
            seed,
            max_epochs: self.max_epochs.unwrap_or(self.recipe.max_epochs),
            early_stop_patience: self.early_stop_patience.unwrap_or(self.recipe.early_stop_patience),
            ..self.recipe.clone()
        }
    }

    fn zero_shot(&self) -> &NamedInit {
        let by_name = self.zero_shot_base.as_ref().and_then(|n| self.inits.iter().find(|i| &i.name == n));
        by_name
            .or_else(|| self.inits.iter().find(|i| matches!(i.init, Init::Checkpoint { .. })))
            .unwrap_or(&self.inits[0])
    }
}

/// Fine-tunes `model` in place: freezes everything outside the plan's
/// trainable scope, switches to the plan's learning rate and runs the
/// standard frame training loop.
pub fn finetune_frame_model(
    model: &mut FrameModel,
    data: &FrameTrainData<'_>,
    plan: &FinetunePlan,
    augmentation: &AugmentationPolicy,
) -> Result<crate::checkpoint::ModelCheckpoint> {
    model.set_frozen_blocks(plan.trainable_scope.frozen_blocks());
    model.config.learning_rate = plan.learning_rate;
    let report = train_model(model, data, augmentation)?;
    model.to_checkpoint(report.provenance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Done {
        checkpoint: PathBuf,
        checkpoint_hash: String,
        epochs_trained: usize,
        metrics: ModelMetrics,
    },
    Failed {
        kind: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub init: String,
    pub fraction: f64,
    pub seed: u64,
    pub identity_count: usize,
    pub identities: Vec<String>,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub init: String,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub zero_shot: ZeroShot,
    pub target_identities: usize,
}

impl SweepResult {
    pub fn cell(&self, init: &str, fraction: f64, seed: u64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.init == init && c.fraction == fraction && c.seed == seed)
    }
}

/// Frames and manifests a sweep draws from.
pub struct SweepData<'a> {
    /// Target-version manifest; its train partition is subset per cell.
    pub target: &'a DatasetManifest,
    /// Extracted frames of the target train partition.
    pub target_frames: &'a FrameIndex,
    /// Held-out evaluation videos, identity-disjoint from the target train partition.
    pub eval: &'a DatasetManifest,
    pub eval_frames: &'a FrameIndex,
    pub cache_root: &'a Path,
}

fn failed(e: &Error) -> CellOutcome {
    CellOutcome::Failed { kind: e.kind().into(), message: e.to_string() }
}

fn cell_name(init: &str, fraction: f64, seed: u64) -> String {
    format!("{init}_f{:03}_s{seed}", (fraction * 100.0).round() as u32)
}

/// Runs every (init, fraction, seed) cell plus the untrained zero-shot base
/// and writes `<out_dir>/<cell>/{checkpoint.safetensors,metrics.json}` and
/// `<out_dir>/sweep_summary.json`. A failing cell is recorded and the sweep
/// continues.
pub fn run_decay_sweep(
    plan: &FinetunePlan,
    data: &SweepData<'_>,
    augmentation: &AugmentationPolicy,
    out_dir: &Path,
) -> Result<SweepResult> {
    plan.validate()?;
    let eval_ids: BTreeSet<String> = data.eval.identities().into_iter().collect();
    let target_train = data.target.partition(Split::Train).with_class_scheme(plan.scheme());
    let leaked: Vec<String> = target_train.identities().into_iter().filter(|i| eval_ids.contains(i)).collect();
    if !leaked.is_empty() {
        return Err(Error::IdentityLeak(leaked));
    }
    let eval_manifest = data.eval.clone().with_class_scheme(plan.scheme());
    let evaluate = |model: &FrameModel| -> Result<ModelMetrics> {
        evaluate_predictions(&predict_videos(model, data.eval_frames, &eval_manifest, data.cache_root)?)
    };

    let base = plan.zero_shot();
    let zero_shot = ZeroShot {
        init: base.name.clone(),
        outcome: match FrameModel::build(&plan.cell_config(&base.init, plan.seeds[0])).and_then(|m| {
            let metrics = evaluate(&m)?;
            let ckpt = m.to_checkpoint(Default::default())?;
            let path = out_dir.join("zero_shot").join("checkpoint.safetensors");
            let hash = ckpt.save(&path)?;
            Ok(CellOutcome::Done { checkpoint: path, checkpoint_hash: hash, epochs_trained: 0, metrics })
        }) {
            Ok(o) => o,
            Err(e) => failed(&e),
        },
    };

    let mut cells = Vec::new();
    for named in &plan.inits {
        for &fraction in &plan.identity_fractions {
            for &seed in &plan.seeds {
                let name = cell_name(&named.name, fraction, seed);
                let _span = tracing::info_span!("sweep_cell", cell = %name).entered();
                let subset = subset_by_identity_fraction(&target_train, fraction, seed)?;
                let identities = subset.identities();
                let outcome = run_cell(plan, data, augmentation, &named.init, &subset, seed, &out_dir.join(&name), &evaluate)
                    .unwrap_or_else(|e| {
                        tracing::warn!(error = %e, "sweep cell failed");
                        failed(&e)
                    });
                if let CellOutcome::Done { metrics, .. } = &outcome {
                    write_json_atomic(&out_dir.join(&name).join("metrics.json"), metrics)?;
                }
                cells.push(SweepCell {
                    init: named.name.clone(),
                    fraction,
                    seed,
                    identity_count: identities.len(),
                    identities,
                    outcome,
                });
            }
        }
    }
    let result = SweepResult { cells, zero_shot, target_identities: target_train.identities().len() };
    write_json_atomic(&out_dir.join("sweep_summary.json"), &result)?;
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    plan: &FinetunePlan,
    data: &SweepData<'_>,
    augmentation: &AugmentationPolicy,
    init: &Init,
    subset: &DatasetManifest,
    seed: u64,
    dir: &Path,
    evaluate: &dyn Fn(&FrameModel) -> Result<ModelMetrics>,
) -> Result<CellOutcome> {
    let split = split_identities(subset, plan.val_fraction, seed)?;
    let train_index = data.target_frames.restrict_to_identities(&split.train_identities);
    let val_index = data.target_frames.restrict_to_identities(&split.held_identities);
    let (train_manifest, _) = split.apply(subset);
    let train_data = FrameTrainData {
        train: &train_index,
        val: &val_index,
        cache_root: data.cache_root,
        train_manifest_hash: train_manifest.content_hash(),
    };
    let mut model = FrameModel::build(&plan.cell_config(init, seed))?;
    let ckpt = finetune_frame_model(&mut model, &train_data, plan, augmentation)?;
    let path = dir.join("checkpoint.safetensors");
    let checkpoint_hash = ckpt.save(&path)?;
    Ok(CellOutcome::Done {
        checkpoint: path,
        checkpoint_hash,
        epochs_trained: ckpt.meta.provenance.epochs_trained,
        metrics: evaluate(&model)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_validation() {
        assert!(FinetunePlan::default().validate().is_ok());
        let unsorted = FinetunePlan { identity_fractions: vec![0.5, 0.2], ..Default::default() };
        assert!(unsorted.validate().is_err());
        let zero = FinetunePlan { identity_fractions: vec![0.0, 0.5], ..Default::default() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn cell_config_freezes_all_but_last_stage() {
        let plan = FinetunePlan::default();
        let c = plan.cell_config(&Init::Random, 4);
        assert_eq!(c.frozen_blocks, [1, 2, 3].into());
        assert_eq!((c.learning_rate, c.seed, c.num_classes), (2e-5, 4, 2));
    }

    #[test]
    fn zero_shot_prefers_checkpoint_init() {
        let plan = FinetunePlan {
            inits: vec![
                NamedInit { name: "imagenet".into(), init: Init::default() },
                NamedInit { name: "prior".into(), init: Init::Checkpoint { path: "x".into() } },
            ],
            ..Default::default()
        };
        assert_eq!(plan.zero_shot().name, "prior");
        let named = FinetunePlan { zero_shot_base: Some("imagenet".into()), ..plan };
        assert_eq!(named.zero_shot().name, "imagenet");
    }
}
