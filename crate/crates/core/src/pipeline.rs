//! Config-driven experiment stages with content-addressed outputs.
//!
//! Every stage writes into `<output_dir>/<config_hash>/<stage>/` and ends by
//! writing `stage.json`: the stage's input fingerprint, the fingerprints of
//! the upstream stages it read, and the SHA-256 of every artifact it wrote.
//! A stage whose `stage.json` matches its current input fingerprint and whose
//! artifacts are intact is skipped. Frames and embeddings live in the shared
//! cache root, keyed by extraction and checkpoint fingerprints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::artifact::{hash_serialized, read_json, sha256_file, write_atomic, write_json_atomic};
use crate::checkpoint::ModelCheckpoint;
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::eval::{self, plot, EvaluationReport, PredictionSet};
use crate::extraction::{build_frame_dataset, ExtractionConfig, FrameCache, FrameIndex};
use crate::finetune::{run_decay_sweep, CellOutcome, FinetunePlan, NamedInit, SweepData, SweepResult};
use crate::frame::{
    extract_embeddings, predict_videos, train_frame_model, AugmentationPolicy, FrameModel, FrameModelConfig,
    FrameTrainData, Init,
};
use crate::manifest::{load_manifest, split_identities, ClassScheme, DatasetManifest, Split};
use crate::temporal::{predict_temporal_videos, summarize_folds, train_temporal_cv, TemporalModel, TemporalModelConfig};

pub const CACHE_ENV: &str = "DECAY_BENCH_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest whose train partition trains both stages and whose test
    /// partition is the same-version evaluation set.
    pub train_manifest: PathBuf,
    /// Manifests of other dataset versions; their test partitions are
    /// evaluated with binary labels.
    pub eval_manifests: Vec<PathBuf>,
    /// Manifest of the version fine-tuning adapts to.
    pub finetune_manifest: Option<PathBuf>,
    pub class_scheme: ClassScheme,
    /// Identities of the training partition held out for frame-model early stopping.
    pub frame_val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: PathBuf::from("manifest.csv"),
            eval_manifests: Vec::new(),
            finetune_manifest: None,
            class_scheme: ClassScheme::Binary,
            frame_val_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    /// Adds the stage-one checkpoint of this experiment as an init named `stage1`.
    pub stage1_init: bool,
    /// Architecture and training recipe come from the `frame` section.
    pub plan: FinetunePlan,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { stage1_init: true, plan: FinetunePlan { inits: Vec::new(), ..FinetunePlan::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Upper bound on videos per PCA scatter.
    pub pca_max_videos: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { pca_max_videos: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Overrides the seed of every section.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cache_root: PathBuf,
    pub workers: usize,
    pub data: DataConfig,
    pub extraction: ExtractionConfig,
    pub frame: FrameModelConfig,
    pub augmentation: AugmentationPolicy,
    pub temporal: TemporalModelConfig,
    pub finetune: Option<FinetuneSection>,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            cache_root: PathBuf::from("cache"),
            workers: 1,
            data: DataConfig::default(),
            extraction: ExtractionConfig::default(),
            frame: FrameModelConfig::default(),
            augmentation: AugmentationPolicy::default(),
            temporal: TemporalModelConfig::default(),
            finetune: None,
            report: ReportConfig::default(),
        }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, location: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse { location: location.into(), message: e.to_string() })
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.rebase(&base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        self.output_dir = absolute(base, &self.output_dir);
        self.cache_root = absolute(base, &self.cache_root);
        self.data.train_manifest = absolute(base, &self.data.train_manifest);
        for m in &mut self.data.eval_manifests {
            *m = absolute(base, m);
        }
        if let Some(m) = &mut self.data.finetune_manifest {
            *m = absolute(base, m);
        }
        let rebase_init = |init: &mut Init| match init {
            Init::Checkpoint { path } => *path = absolute(base, path),
            Init::ImagenetPretrained { weights: Some(w) } => *w = absolute(base, w),
            _ => {}
        };
        rebase_init(&mut self.frame.init);
        if let Some(f) = &mut self.finetune {
            for named in &mut f.plan.inits {
                rebase_init(&mut named.init);
            }
        }
    }

    /// Applies the global seed and derived settings, then validates every
    /// section and checks that referenced files exist.
    pub fn resolve(mut self) -> Result<Self> {
        self.frame.seed = self.seed;
        self.temporal.seed = self.seed;
        self.augmentation.seed = self.seed;
        let classes = self.data.class_scheme.num_classes();
        self.frame.num_classes = classes;
        self.temporal.num_classes = classes;
        if let Some(f) = &mut self.finetune {
            f.plan.recipe = FrameModelConfig { init: Init::Random, ..self.frame.clone() };
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.extraction.validate()?;
        self.frame.validate()?;
        self.augmentation.validate()?;
        self.temporal.validate()?;
        if !(self.data.frame_val_fraction > 0.0 && self.data.frame_val_fraction < 1.0) {
            return Err(Error::Config("data.frame_val_fraction must lie in (0, 1)".into()));
        }
        if let Some(f) = &self.finetune {
            if f.plan.inits.is_empty() && !f.stage1_init {
                return Err(Error::Config("finetune needs stage1_init or at least one init".into()));
            }
            if self.data.finetune_manifest.is_none() {
                return Err(Error::Config("finetune section given without data.finetune_manifest".into()));
            }
        }
        let mut paths: Vec<&Path> = vec![&self.data.train_manifest];
        paths.extend(self.data.eval_manifests.iter().map(PathBuf::as_path));
        paths.extend(self.data.finetune_manifest.as_deref());
        if let Init::Checkpoint { path } = &self.frame.init {
            paths.push(path);
        }
        for named in self.finetune.iter().flat_map(|f| &f.plan.inits) {
            if let Init::Checkpoint { path } = &named.init {
                paths.push(path);
            }
        }
        for p in paths {
            if !p.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// One loaded manifest together with the directory name its stage outputs use.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub key: String,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub fingerprint: String,
    pub config_hash: String,
    pub upstream: BTreeMap<String, String>,
    /// SHA-256 of every artifact, keyed by path relative to the stage directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Extract,
    TrainFrame,
    Embed,
    TrainTemporal,
    Finetune,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Extract, Stage::TrainFrame, Stage::Embed, Stage::TrainTemporal, Stage::Finetune, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::TrainFrame => "train-frame",
            Stage::Embed => "embed",
            Stage::TrainTemporal => "train-temporal",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Extract => &[],
            Stage::TrainFrame => &[Stage::Extract],
            Stage::Embed => &[Stage::Extract, Stage::TrainFrame],
            Stage::TrainTemporal => &[Stage::Embed],
            Stage::Finetune => &[Stage::Extract, Stage::TrainFrame],
            Stage::Evaluate => &[Stage::TrainFrame, Stage::Embed, Stage::TrainTemporal],
            Stage::Report => &[Stage::Evaluate, Stage::Embed, Stage::Finetune],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub dir: PathBuf,
    pub cached: bool,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub train: ManifestEntry,
    pub evals: Vec<ManifestEntry>,
    pub finetune_target: Option<ManifestEntry>,
}

fn manifest_entry(path: &Path, scheme: ClassScheme) -> Result<ManifestEntry> {
    let manifest = load_manifest(path)?.with_class_scheme(scheme);
    let version = if manifest.version.is_empty() { "data".to_string() } else { manifest.version.replace(['/', '+'], "_") };
    let key = format!("{version}-{}", &manifest.content_hash()[..8]);
    Ok(ManifestEntry { key, manifest })
}

/// Records of `manifest` that produced frames.
fn with_frames(manifest: &DatasetManifest, index: &FrameIndex) -> DatasetManifest {
    let ids: std::collections::BTreeSet<String> = index.video_ids().into_iter().collect();
    let mut out = manifest.clone();
    out.records.retain(|r| ids.contains(&r.video_id));
    out
}

impl Experiment {
    /// Resolves the config, applies the cache-root environment override and
    /// loads every manifest. No stage work happens here.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        let mut config = config.resolve()?;
        if let Some(root) = std::env::var_os(CACHE_ENV) {
            config.cache_root = PathBuf::from(root);
        }
        let scheme = config.data.class_scheme;
        let train = manifest_entry(&config.data.train_manifest, scheme)?;
        let evals = config.data.eval_manifests.iter().map(|p| manifest_entry(p, scheme)).collect::<Result<Vec<_>>>()?;
        let finetune_target = config.data.finetune_manifest.as_deref().map(|p| manifest_entry(p, scheme)).transpose()?;

        // locations and worker counts do not change results; manifests enter by content
        let mut hashed = serde_json::to_value(&config)?;
        if let Some(obj) = hashed.as_object_mut() {
            for key in ["output_dir", "cache_root", "workers"] {
                obj.remove(key);
            }
            obj.remove("data").map(|mut d| {
                if let Some(d) = d.as_object_mut() {
                    for key in ["train_manifest", "eval_manifests", "finetune_manifest"] {
                        d.remove(key);
                    }
                }
                obj.insert("data".into(), d);
            });
            obj.insert(
                "manifests".into(),
                serde_json::json!({
                    "train": train.manifest.content_hash(),
                    "eval": evals.iter().map(|e| e.manifest.content_hash()).collect::<Vec<_>>(),
                    "finetune": finetune_target.as_ref().map(|e| e.manifest.content_hash()),
                }),
            );
        }
        let config_hash = hash_serialized(&hashed)[..16].to_string();
        Ok(Self { config, config_hash, train, evals, finetune_target })
    }

    pub fn root(&self) -> PathBuf {
        self.config.output_dir.join(&self.config_hash)
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root().join(stage.name())
    }

    fn frame_cache(&self) -> FrameCache {
        FrameCache::new(self.config.cache_root.join("frames"))
    }

    /// Distinct manifests in evaluation order: train first, then evals, then
    /// the fine-tuning target.
    pub fn manifests(&self) -> Vec<&ManifestEntry> {
        let mut out: Vec<&ManifestEntry> = vec![&self.train];
        for e in self.evals.iter().chain(self.finetune_target.as_ref()) {
            if out.iter().all(|m| m.key != e.key) {
                out.push(e);
            }
        }
        out
    }

    /// Input fingerprint of a stage: its config slice and the fingerprints
    /// of its upstream stages, all derived from the config alone.
    pub fn fingerprint(&self, stage: Stage) -> String {
        let c = &self.config;
        let slice = match stage {
            Stage::Extract => serde_json::json!({
                "extraction": c.extraction,
                "manifests": self.manifests().iter().map(|m| m.manifest.content_hash()).collect::<Vec<_>>(),
            }),
            Stage::TrainFrame => serde_json::json!({
                "frame": c.frame, "augmentation": c.augmentation, "val": c.data.frame_val_fraction,
            }),
            Stage::Embed => serde_json::json!({}),
            Stage::TrainTemporal => serde_json::json!({ "temporal": c.temporal }),
            Stage::Finetune => serde_json::json!({ "finetune": c.finetune }),
            Stage::Evaluate => serde_json::json!({}),
            Stage::Report => serde_json::json!({ "report": c.report }),
        };
        let upstream: Vec<String> = self.upstream(stage).into_iter().map(|s| self.fingerprint(s)).collect();
        hash_serialized(&serde_json::json!({ "stage": stage.name(), "slice": slice, "upstream": upstream }))[..16].to_string()
    }

    /// Stages `stage` reads from; fine-tuning only when configured.
    pub fn upstream(&self, stage: Stage) -> Vec<Stage> {
        stage.upstream().iter().copied().filter(|s| *s != Stage::Finetune || self.config.finetune.is_some()).collect()
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("stage.json")
    }

    /// The stage's record when it is complete for the current config and
    /// every artifact still hashes to the recorded value.
    pub fn completed(&self, stage: Stage) -> Result<Option<StageRecord>> {
        let path = self.record_path(stage);
        if !path.is_file() {
            return Ok(None);
        }
        let record: StageRecord = read_json(&path)?;
        if record.fingerprint != self.fingerprint(stage) {
            return Ok(None);
        }
        let dir = self.stage_dir(stage);
        for (rel, hash) in &record.artifacts {
            let p = dir.join(rel);
            if !p.is_file() || &sha256_file(&p)? != hash {
                return Ok(None);
            }
        }
        Ok(Some(record))
    }

    fn require(&self, stage: Stage) -> Result<StageRecord> {
        self.completed(stage)?
            .ok_or_else(|| Error::MissingUpstream { stage: stage.name().into(), fingerprint: self.fingerprint(stage) })
    }

    fn finish(&self, stage: Stage) -> Result<StageRecord> {
        let dir = self.stage_dir(stage);
        let mut artifacts = BTreeMap::new();
        for entry in walkdir::WalkDir::new(&dir).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Precondition(format!("cannot list {}: {e}", dir.display())))?;
            let rel = entry.path().strip_prefix(&dir).expect("walk stays below its root");
            if entry.file_type().is_file() && rel != Path::new("stage.json") {
                artifacts.insert(rel.to_string_lossy().replace('\\', "/"), sha256_file(entry.path())?);
            }
        }
        let upstream = self.upstream(stage).into_iter().map(|s| (s.name().to_string(), self.fingerprint(s))).collect();
        let record = StageRecord {
            stage: stage.name().into(),
            fingerprint: self.fingerprint(stage),
            config_hash: self.config_hash.clone(),
            upstream,
            artifacts,
        };
        write_json_atomic(&self.record_path(stage), &record)?;
        Ok(record)
    }

    /// Runs `stage` unless an intact, up-to-date copy exists.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let dir = self.stage_dir(stage);
        let outcome = |cached| StageOutcome { stage: stage.name().into(), dir: dir.clone(), cached };
        if self.completed(stage)?.is_some() {
            tracing::info!(stage = stage.name(), fingerprint = %self.fingerprint(stage), "cache hit");
            return Ok(outcome(true));
        }
        for up in self.upstream(stage) {
            self.require(up)?;
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&self.root().join("config.resolved.toml"), self.config.to_toml()?.as_bytes())?;
        let _span = tracing::info_span!("stage", stage = stage.name(), config_hash = %self.config_hash).entered();
        tracing::info!("stage started");
        match stage {
            Stage::Extract => self.extract(&dir)?,
            Stage::TrainFrame => self.train_frame(&dir)?,
            Stage::Embed => self.embed(&dir)?,
            Stage::TrainTemporal => self.train_temporal(&dir)?,
            Stage::Finetune => self.finetune(&dir)?,
            Stage::Evaluate => self.evaluate(&dir)?,
            Stage::Report => self.report(&dir)?,
        }
        self.finish(stage)?;
        tracing::info!("stage finished");
        Ok(outcome(false))
    }

    /// Every stage in dependency order; fine-tuning only when configured.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL
            .iter()
            .filter(|s| **s != Stage::Finetune || self.config.finetune.is_some())
            .map(|s| self.run(*s))
            .collect()
    }

    fn index_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.stage_dir(Stage::Extract).join(&entry.key).join("frame_index.json")
    }

    pub fn frame_index(&self, entry: &ManifestEntry) -> Result<FrameIndex> {
        FrameIndex::read(&self.index_path(entry))
    }

    pub fn frame_checkpoint_path(&self) -> PathBuf {
        self.stage_dir(Stage::TrainFrame).join("checkpoint.safetensors")
    }

    pub fn embedding_store(&self) -> Result<EmbeddingStore> {
        let hash = sha256_file(&self.frame_checkpoint_path())?;
        Ok(EmbeddingStore::new(&self.config.cache_root, &hash[..16]))
    }

    fn extract(&self, dir: &Path) -> Result<()> {
        let cache = self.frame_cache();
        let mut summary = BTreeMap::new();
        for entry in self.manifests() {
            let (index, stats) = build_frame_dataset(&entry.manifest, &self.config.extraction, &cache, self.config.workers)?;
            if index.frames.is_empty() {
                return Err(Error::EmptyDataset(format!("no frames extracted for {}", entry.key)));
            }
            write_json_atomic(&dir.join(&entry.key).join("frame_index.json"), &index)?;
            summary.insert(
                entry.key.clone(),
                serde_json::json!({
                    "version": entry.manifest.version,
                    "manifest_hash": entry.manifest.content_hash(),
                    "videos": entry.manifest.len(),
                    "skipped": index.skipped.len(),
                    "frames": index.frames.len(),
                    "cache_hits": stats.cache_hits,
                    "computed": stats.computed,
                }),
            );
        }
        write_json_atomic(&dir.join("summary.json"), &summary)
    }

    fn train_frame(&self, dir: &Path) -> Result<()> {
        let index = self.frame_index(&self.train)?;
        let train_part = with_frames(&self.train.manifest.partition(Split::Train), &index);
        let split = split_identities(&train_part, self.config.data.frame_val_fraction, self.config.seed)?;
        let (train_manifest, _) = split.apply(&train_part);
        let train_index = index.restrict_to_identities(&split.train_identities);
        let val_index = index.restrict_to_identities(&split.held_identities);
        let cache = self.frame_cache();
        let data = FrameTrainData {
            train: &train_index,
            val: &val_index,
            cache_root: cache.root(),
            train_manifest_hash: train_manifest.content_hash(),
        };
        let ckpt = train_frame_model(&data, &self.config.frame, &self.config.augmentation)?;
        ckpt.save(&dir.join("checkpoint.safetensors"))?;
        write_json_atomic(&dir.join("split.json"), &split)?;
        write_json_atomic(&dir.join("provenance.json"), &ckpt.meta.provenance)
    }

    fn embed(&self, dir: &Path) -> Result<()> {
        let model = FrameModel::from_checkpoint(&ModelCheckpoint::load(&self.frame_checkpoint_path())?)?;
        let store = self.embedding_store()?;
        let cache_root = self.frame_cache().root().to_path_buf();
        let mut listing = BTreeMap::new();
        for entry in self.manifests() {
            let index = self.frame_index(entry)?;
            let scheme = entry.manifest.class_scheme;
            let (mut computed, mut reused) = (0usize, 0usize);
            for video_id in index.video_ids() {
                let Some(record) = entry.manifest.get(&video_id) else { continue };
                if store.contains(&video_id) {
                    reused += 1;
                } else {
                    let frames = index.frame_set(&cache_root, &video_id)?;
                    let seq = extract_embeddings(&model, &frames, record.class_id(scheme), &record.identity_id)?;
                    let timestamps: Vec<f64> = frames.frames.iter().map(|f| f.timestamp).collect();
                    store.save(&seq, &timestamps)?;
                    computed += 1;
                }
                let npy = store.dir().join(format!("{video_id}.npy"));
                listing.insert(video_id, sha256_file(&npy)?);
            }
            tracing::info!(manifest = %entry.key, computed, reused, "embeddings ready");
        }
        write_json_atomic(
            &dir.join("embeddings.json"),
            &serde_json::json!({ "store": store.dir(), "extractor": store.fingerprint(), "videos": listing }),
        )
    }

    fn train_temporal(&self, dir: &Path) -> Result<()> {
        let store = self.embedding_store()?;
        let index = self.frame_index(&self.train)?;
        let manifest = with_frames(&self.train.manifest, &index);
        let folds = train_temporal_cv(&store, &manifest, &self.config.temporal)?;
        let reports: Vec<_> = folds.iter().map(|f| f.report.clone()).collect();
        for f in &folds {
            f.checkpoint.save(&dir.join(format!("fold_{}.safetensors", f.report.fold)))?;
        }
        write_json_atomic(&dir.join("folds.json"), &reports)?;
        write_json_atomic(&dir.join("cv_summary.json"), &summarize_folds(&reports))
    }

    fn temporal_models(&self) -> Result<Vec<(TemporalModel, String)>> {
        let dir = self.stage_dir(Stage::TrainTemporal);
        (0..self.config.temporal.folds)
            .map(|k| {
                let path = dir.join(format!("fold_{k}.safetensors"));
                Ok((TemporalModel::from_checkpoint(&ModelCheckpoint::load(&path)?)?, sha256_file(&path)?))
            })
            .collect()
    }

    pub fn finetune_plan(&self) -> Option<FinetunePlan> {
        let section = self.config.finetune.as_ref()?;
        let mut plan = section.plan.clone();
        if section.stage1_init {
            plan.inits.insert(0, NamedInit { name: "stage1".into(), init: Init::Checkpoint { path: self.frame_checkpoint_path() } });
        }
        Some(plan)
    }

    fn finetune(&self, dir: &Path) -> Result<()> {
        let (Some(plan), Some(target)) = (self.finetune_plan(), &self.finetune_target) else {
            return Err(Error::Config("no finetune section configured".into()));
        };
        let index = self.frame_index(target)?;
        let target_manifest = with_frames(&target.manifest, &index);
        let eval_manifest = target_manifest.partition(Split::Test);
        let cache = self.frame_cache();
        let eval_frames = index.restrict_to_manifest(&eval_manifest);
        let data = SweepData {
            target: &target_manifest,
            target_frames: &index,
            eval: &eval_manifest,
            eval_frames: &eval_frames,
            cache_root: cache.root(),
        };
        let result = run_decay_sweep(&plan, &data, &self.config.augmentation, dir)?;
        let failed = result.cells.iter().filter(|c| matches!(c.outcome, CellOutcome::Failed { .. })).count();
        if failed > 0 {
            tracing::warn!(failed, "some sweep cells failed");
        }
        Ok(())
    }

    /// Test partition of `entry`, restricted to videos with frames.
    fn test_set(&self, entry: &ManifestEntry) -> Result<(DatasetManifest, FrameIndex)> {
        let index = self.frame_index(entry)?;
        let manifest = with_frames(&entry.manifest.partition(Split::Test), &index);
        if manifest.is_empty() {
            return Err(Error::EmptyDataset(format!("test partition of {} has no usable videos", entry.key)));
        }
        Ok((manifest.clone(), index.restrict_to_manifest(&manifest)))
    }

    /// The train manifest's test set, then each evaluation manifest's.
    fn test_sets(&self) -> Vec<&ManifestEntry> {
        let mut out: Vec<&ManifestEntry> = vec![&self.train];
        for e in &self.evals {
            if out.iter().all(|m| m.key != e.key) {
                out.push(e);
            }
        }
        out
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let frame_path = self.frame_checkpoint_path();
        let frame = FrameModel::from_checkpoint(&ModelCheckpoint::load(&frame_path)?)?;
        let frame_hash = sha256_file(&frame_path)?;
        let temporal = self.temporal_models()?;
        let store = self.embedding_store()?;
        let cache_root = self.frame_cache().root().to_path_buf();
        let train_version = self.train.manifest.version.clone();
        let mut summary = Vec::new();
        for entry in self.test_sets() {
            let (manifest, index) = self.test_set(entry)?;
            let runs: Vec<(&str, Vec<PredictionSet>, Vec<String>)> = vec![
                ("frame", vec![predict_videos(&frame, &index, &manifest, &cache_root)?], vec![frame_hash.clone()]),
                (
                    "temporal",
                    temporal.iter().map(|(m, _)| predict_temporal_videos(m, &store, &manifest)).collect::<Result<_>>()?,
                    temporal.iter().map(|(_, h)| h.clone()).collect(),
                ),
            ];
            for (model, sets, hashes) in runs {
                let name = format!("{model}__{}", entry.key);
                let title = format!("{model} model, trained on {train_version}, tested on {}", manifest.version);
                let same = entry.key == self.train.key;
                let mut report =
                    if same { eval::summarize(&title, &sets)? } else { eval::cross_evaluate(&title, &sets, &train_version)? };
                report.provenance.config_hash = self.config_hash.clone();
                report.provenance.checkpoint_hashes = hashes;
                report.provenance.manifest_hash = manifest.content_hash();
                report.provenance.train_versions = vec![train_version.clone()];
                report.provenance.test_versions = vec![manifest.version.clone()];
                if same && temporal.len() > 1 && model == "temporal" {
                    report.aggregation = format!("{} (one model per cross-validation fold)", report.aggregation);
                }
                write_json_atomic(&dir.join(&name).join("predictions.json"), &sets)?;
                eval::write_report(&dir.join(&name), &report)?;
                summary.push(serde_json::json!({ "name": name, "model": model, "test_set": entry.key, "cross_version": !same }));
            }
        }
        write_json_atomic(&dir.join("summary.json"), &summary)
    }

    /// Every evaluation report, keyed by `<model>__<manifest key>`.
    pub fn evaluation_reports(&self) -> Result<BTreeMap<String, EvaluationReport>> {
        let dir = self.stage_dir(Stage::Evaluate);
        let summary: Vec<serde_json::Value> = read_json(&dir.join("summary.json"))?;
        summary
            .iter()
            .filter_map(|v| v["name"].as_str())
            .map(|name| Ok((name.to_string(), read_json(&dir.join(name).join("report.json"))?)))
            .collect()
    }

    pub fn sweep_result(&self) -> Result<Option<SweepResult>> {
        let path = self.stage_dir(Stage::Finetune).join("sweep_summary.json");
        if self.config.finetune.is_none() || !path.is_file() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    fn report(&self, dir: &Path) -> Result<()> {
        let reports = self.evaluation_reports()?;
        let sweep = self.sweep_result()?;
        let mut md = format!("# Experiment {}\n\n", self.config_hash);
        md.push_str(&results_table(&reports));
        if let Some(s) = &sweep {
            md.push_str(&sweep_table(s));
        }

        for entry in self.test_sets() {
            let curves: Vec<(String, Vec<eval::PrPoint>)> = reports
                .iter()
                .filter(|(k, _)| k.ends_with(&format!("__{}", entry.key)))
                .filter_map(|(k, r)| Some((k.split("__").next()?.to_string(), r.models.first()?.pr_curve.clone()?)))
                .collect();
            if !curves.is_empty() {
                plot::pr_curves(&dir.join(format!("pr_{}.svg", entry.key)), &format!("Precision-recall, {}", entry.key), &curves)?;
            }
            self.pca_plot(dir, entry)?;
        }
        if let Some(s) = &sweep {
            let curves: Vec<(String, Vec<eval::PrPoint>)> = s
                .cells
                .iter()
                .filter_map(|c| match &c.outcome {
                    CellOutcome::Done { metrics, .. } => {
                        Some((format!("{} {:.0}% s{}", c.init, c.fraction * 100.0, c.seed), metrics.pr_curve.clone()?))
                    }
                    CellOutcome::Failed { .. } => None,
                })
                .collect();
            if !curves.is_empty() {
                plot::pr_curves(&dir.join("pr_finetune.svg"), "Precision-recall after fine-tuning", &curves)?;
            }
        }
        let scalars: BTreeMap<&String, &BTreeMap<String, eval::Stat>> = reports.iter().map(|(k, r)| (k, &r.scalars)).collect();
        write_json_atomic(
            &dir.join("report.json"),
            &serde_json::json!({ "config_hash": self.config_hash, "evaluations": scalars, "finetune": sweep }),
        )?;
        write_atomic(&dir.join("report.md"), md.as_bytes())
    }

    /// Scatter of per-video mean embeddings of a test set on its first two
    /// principal components, coloured by technique.
    fn pca_plot(&self, dir: &Path, entry: &ManifestEntry) -> Result<()> {
        let store = self.embedding_store()?;
        let (manifest, _) = self.test_set(entry)?;
        let scheme = ClassScheme::Multiclass;
        let mut rows = Vec::new();
        let mut classes = Vec::new();
        for r in manifest.records.iter().take(self.config.report.pca_max_videos) {
            let seq = store.load(&r.video_id)?;
            let t = seq.len() as f64;
            rows.push(seq.embeddings.columns().into_iter().map(|c| c.iter().map(|v| *v as f64).sum::<f64>() / t).collect::<Vec<f64>>());
            classes.push(r.class_id(scheme));
        }
        let d = rows.first().map_or(0, Vec::len);
        let x = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
        match eval::pca::pca_features(&x, 2) {
            Ok(pca) => {
                let pts: Vec<(f64, f64, usize)> =
                    (0..x.nrows()).map(|i| (pca.projection[[i, 0]], pca.projection[[i, 1]], classes[i])).collect();
                let title = format!(
                    "PCA of frame embeddings, {} ({:.1}% + {:.1}% variance)",
                    entry.key,
                    100.0 * pca.explained_variance_ratio[0],
                    100.0 * pca.explained_variance_ratio[1]
                );
                plot::pca_scatter(&dir.join(format!("pca_{}.svg", entry.key)), &title, &pts, &scheme.class_names())?;
                write_json_atomic(
                    &dir.join(format!("pca_{}.json", entry.key)),
                    &serde_json::json!({ "explained_variance_ratio": pca.explained_variance_ratio, "points": pts }),
                )
            }
            Err(Error::DegenerateInput(msg)) => {
                tracing::warn!(manifest = %entry.key, %msg, "PCA skipped");
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

fn pm(s: Option<&eval::Stat>) -> String {
    match s {
        Some(s) if s.values.len() > 1 => format!("{:.2} ± {:.2}", s.mean, s.std),
        Some(s) => format!("{:.2}", s.mean),
        None => "n/a".into(),
    }
}

fn results_table(reports: &BTreeMap<String, EvaluationReport>) -> String {
    let mut md = String::from(
        "## Results\n\n| Model | Train | Test | Accuracy (%) | AUROC (%) | Real P | Real R | Real F1 | Fake P | Fake R | Fake F1 |\n\
         |---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for (name, r) in reports {
        let s = |k: &str| pm(r.scalars.get(k));
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            name.split("__").next().unwrap_or(name),
            r.provenance.train_versions.join(","),
            r.provenance.test_versions.join(","),
            s("accuracy"),
            s("auroc"),
            s("precision/real"),
            s("recall/real"),
            s("f1/real"),
            s("precision/fake"),
            s("recall/fake"),
            s("f1/fake"),
        ));
    }
    let multiclass: Vec<_> = reports.iter().filter(|(_, r)| r.class_names.len() > 2).collect();
    for (name, r) in multiclass {
        md.push_str(&format!("\n### {name}\n\n| Class | Precision (%) | Recall (%) | F1 (%) |\n|---|---|---|---|\n"));
        for c in &r.class_names {
            let s = |m: &str| pm(r.scalars.get(&format!("{m}/{c}")));
            md.push_str(&format!("| {c} | {} | {} | {} |\n", s("precision"), s("recall"), s("f1")));
        }
    }
    md
}

fn sweep_table(sweep: &SweepResult) -> String {
    let mut md = String::from("\n## Fine-tuning\n\n| Init | Identities | AUROC (%) | Fake recall (%) | Accuracy (%) | Failed |\n|---|---|---|---|---|---|\n");
    if let CellOutcome::Done { metrics, .. } = &sweep.zero_shot.outcome {
        md.push_str(&format!(
            "| {} (zero-shot) | 0 | {} | {} | {:.2} | 0 |\n",
            sweep.zero_shot.init,
            metrics.auroc.map_or("n/a".into(), |a| format!("{a:.2}")),
            metrics.per_class.get(1).map_or("n/a".into(), |c| format!("{:.2}", c.recall)),
            metrics.accuracy
        ));
    }
    let mut groups: BTreeMap<(String, u64), Vec<&crate::finetune::SweepCell>> = BTreeMap::new();
    for c in &sweep.cells {
        groups.entry((c.init.clone(), (c.fraction * 1e6).round() as u64)).or_default().push(c);
    }
    for ((init, _), cells) in groups {
        let done: Vec<&eval::ModelMetrics> = cells
            .iter()
            .filter_map(|c| match &c.outcome {
                CellOutcome::Done { metrics, .. } => Some(metrics),
                CellOutcome::Failed { .. } => None,
            })
            .collect();
        let stat = |f: &dyn Fn(&eval::ModelMetrics) -> Option<f64>| {
            let v: Vec<f64> = done.iter().filter_map(|m| f(m)).collect();
            if v.is_empty() {
                None
            } else {
                Some(eval::Stat::of(v))
            }
        };
        md.push_str(&format!(
            "| {init} | {} | {} | {} | {} | {} |\n",
            cells[0].identity_count,
            pm(stat(&|m| m.auroc).as_ref()),
            pm(stat(&|m| m.per_class.get(1).map(|c| c.recall)).as_ref()),
            pm(stat(&|m| Some(m.accuracy)).as_ref()),
            cells.len() - done.len()
        ));
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = ExperimentConfig { finetune: Some(FinetuneSection::default()), ..Default::default() };
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, "x").unwrap(), c);
    }

    #[test]
    fn missing_manifest_fails_validation() {
        let c = ExperimentConfig { data: DataConfig { train_manifest: "/nonexistent/m.csv".into(), ..Default::default() }, ..Default::default() };
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = ExperimentConfig::default();
        c.rebase(Path::new("/exp"));
        assert_eq!(c.data.train_manifest, PathBuf::from("/exp/manifest.csv"));
        assert_eq!(c.cache_root, PathBuf::from("/exp/cache"));
    }
}
