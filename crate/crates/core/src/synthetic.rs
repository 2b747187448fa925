//! Rendered talking-head videos for desk-scale experiments.
//!
//! Each identity is a cartoon face (skin tone, face shape, eye spacing,
//! hair colour) on a dark flat background. Real videos drift and talk;
//! fakes of each version carry a manipulation trace drawn from the
//! version's artifact mix, restricted to the region the technique edits:
//! the whole face for face swaps, the lower face for lip sync, and the
//! whole face of a motionless head for avatars.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::detect::{BlobConfig, DetectorConfig};
use crate::error::{Error, Result};
use crate::extraction::ExtractionConfig;
use crate::finetune::FinetunePlan;
use crate::frame::augment::{Blur, ColorJitter, ResizeCrop, Rotation};
use crate::frame::{AugmentationPolicy, FrameModelConfig, Init};
use crate::pipeline::{DataConfig, ExperimentConfig, FinetuneSection};
use crate::temporal::TemporalModelConfig;
use crate::manifest::{ClassScheme, DatasetManifest, Label, Split, Technique, VideoRecord};
use crate::rng::{round_half_up, SeededRng};
use crate::video::write_y4m;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    /// Checkerboard texture with 6-pixel cells.
    Checker,
    /// Green-magenta colour cast with a soft vertical gradient.
    ColorCast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub version: String,
    pub identities: usize,
    /// Half real, half fake; fakes cycle through the three techniques.
    pub videos_per_identity: usize,
    pub frames: usize,
    pub fps: u32,
    pub size: u32,
    /// Share of identities assigned to the test partition.
    pub test_fraction: f64,
    /// Probability that a fake carries `Checker`; otherwise `ColorCast`.
    pub checker_share: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            version: "synth-a".into(),
            identities: 40,
            videos_per_identity: 6,
            frames: 8,
            fps: 5,
            size: 64,
            test_fraction: 0.3,
            checker_share: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 4 || self.videos_per_identity < 2 || self.frames == 0 || self.fps == 0 {
            return Err(Error::Config("synthetic data needs >= 4 identities, >= 2 videos each and >= 1 frame".into()));
        }
        if self.size < 32 {
            return Err(Error::Config(format!("synthetic frame size must be at least 32, got {}", self.size)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) || !(0.0..=1.0).contains(&self.checker_share) {
            return Err(Error::Config("test_fraction must lie in (0, 1) and checker_share in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Face {
    skin: [f64; 3],
    hair: [f64; 3],
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_y: f64,
    mouth_w: f64,
}

impl Face {
    fn draw(rng: &mut SeededRng, size: f64) -> Self {
        let tone = rng.uniform(150.0, 230.0);
        Face {
            skin: [tone, tone * rng.uniform(0.72, 0.85), tone * rng.uniform(0.55, 0.7)],
            hair: [rng.uniform(90.0, 200.0), rng.uniform(70.0, 160.0), rng.uniform(60.0, 140.0)],
            rx: size * rng.uniform(0.21, 0.27),
            ry: size * rng.uniform(0.28, 0.34),
            eye_dx: rng.uniform(0.3, 0.45),
            eye_y: rng.uniform(-0.3, -0.15),
            mouth_w: rng.uniform(0.3, 0.45),
        }
    }
}

struct VideoPlan {
    face: Face,
    background: [f64; 3],
    technique: Technique,
    artifact: Option<Artifact>,
}

/// Renders one video's frames.
fn render(plan: &VideoPlan, config: &SyntheticConfig, rng: &mut SeededRng) -> Vec<RgbImage> {
    let size = config.size as f64;
    let f = plan.face;
    let still = plan.technique == Technique::Avatar;
    let (mut cx, mut cy) = (size / 2.0 + rng.uniform(-3.0, 3.0), size / 2.0 + rng.uniform(-2.0, 2.0));
    let (vx, vy) = (rng.uniform(-0.8, 0.8), rng.uniform(-0.5, 0.5));
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let cast_sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    (0..config.frames)
        .map(|t| {
            if !still && t > 0 {
                cx = (cx + vx + rng.uniform(-0.5, 0.5)).clamp(size * 0.4, size * 0.6);
                cy = (cy + vy + rng.uniform(-0.5, 0.5)).clamp(size * 0.42, size * 0.58);
            }
            let open = if still { 0.5 } else { 0.5 + 0.45 * (phase + 1.7 * t as f64).sin() };
            RgbImage::from_fn(config.size, config.size, |x, y| {
                let (x, y) = (x as f64 + 0.5, y as f64 + 0.5);
                let (u, v) = ((x - cx) / f.rx, (y - cy) / f.ry);
                let mut px = plan.background;
                if u * u + v * v <= 1.0 {
                    px = if v < -0.6 { f.hair } else { f.skin };
                    let in_eye = |ex: f64| ((u - ex) / 0.13).powi(2) + ((v - f.eye_y) / 0.09).powi(2) <= 1.0;
                    if in_eye(-f.eye_dx) || in_eye(f.eye_dx) {
                        px = [40.0 + f.skin[0] * 0.3, 40.0, 45.0];
                    }
                    let mouth_h = 0.04 + 0.1 * open;
                    if (u / f.mouth_w).powi(2) + ((v - 0.45) / mouth_h).powi(2) <= 1.0 {
                        px = [f.skin[0] * 0.5, f.skin[1] * 0.3, f.skin[2] * 0.3];
                    }
                    let edited = match plan.technique {
                        Technique::LipSync => v > 0.15,
                        _ => v >= -0.6,
                    };
                    if edited {
                        match plan.artifact {
                            Some(Artifact::Checker) => {
                                let cell = ((x / 6.0).floor() as i64 + (y / 6.0).floor() as i64).rem_euclid(2);
                                let d = if cell == 0 { 38.0 } else { -38.0 };
                                px = px.map(|c| c + d);
                            }
                            Some(Artifact::ColorCast) => {
                                let g = 22.0 + 10.0 * v;
                                px = [px[0] - cast_sign * g, px[1] + cast_sign * g, px[2] - cast_sign * g * 0.5];
                            }
                            None => {}
                        }
                    }
                }
                Rgb(px.map(|c| (c + 5.0 * rng.normal()).round().clamp(0.0, 255.0) as u8))
            })
        })
        .collect()
}

/// Writes `<root>/videos/<video_id>.y4m` for every video and
/// `<root>/manifest.csv` with paths relative to `root`.
pub fn generate_dataset(root: &Path, config: &SyntheticConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let videos_dir = root.join("videos");
    std::fs::create_dir_all(&videos_dir).map_err(|e| Error::io(&videos_dir, e))?;
    let version = config.version.as_str();
    let mut identities: Vec<String> = (0..config.identities).map(|i| format!("{version}-id{i:03}")).collect();
    SeededRng::derive(config.seed, &["synthetic", version, "test-identities"]).shuffle(&mut identities);
    let n_test = round_half_up(config.test_fraction * config.identities as f64).clamp(1, config.identities - 1);
    let fakes = [Technique::FaceSwap, Technique::LipSync, Technique::Avatar];

    let mut records = Vec::new();
    for (rank, identity) in identities.iter().enumerate() {
        let split = if rank < n_test { Split::Test } else { Split::Train };
        let face = Face::draw(&mut SeededRng::derive(config.seed, &["synthetic", version, identity]), config.size as f64);
        for k in 0..config.videos_per_identity {
            let video_id = format!("{identity}-v{k}");
            let mut rng = SeededRng::derive(config.seed, &["synthetic", version, &video_id]);
            let fake = k % 2 == 1;
            let technique = if fake { fakes[(k / 2) % fakes.len()] } else { Technique::Real };
            let artifact = fake.then(|| {
                if rng.bernoulli(config.checker_share) {
                    Artifact::Checker
                } else {
                    Artifact::ColorCast
                }
            });
            let background = [rng.uniform(10.0, 60.0), rng.uniform(10.0, 60.0), rng.uniform(15.0, 70.0)];
            let plan = VideoPlan { face, background, technique, artifact };
            let frames = render(&plan, config, &mut rng);
            let rel = PathBuf::from("videos").join(format!("{video_id}.y4m"));
            write_y4m(&root.join(&rel), &frames, config.fps)?;
            records.push(VideoRecord {
                video_id,
                path: rel,
                label: if fake { Label::Fake } else { Label::Real },
                technique,
                engine: match artifact {
                    None => "none".into(),
                    Some(Artifact::Checker) => "synth-checker".into(),
                    Some(Artifact::ColorCast) => "synth-cast".into(),
                },
                identity_id: identity.clone(),
                dataset_version: version.into(),
                split,
            });
        }
    }
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut manifest = DatasetManifest::new(records, ClassScheme::Binary)?;
    manifest.write_csv(&root.join("manifest.csv"))?;
    manifest.base_dir = Some(root.to_path_buf());
    Ok(manifest)
}

/// Two dataset versions whose fakes differ in their manipulation traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecayStudy {
    pub identities: usize,
    pub videos_per_identity: usize,
    pub frames: usize,
    /// Share of the newer version's fakes that still carry the older trace.
    pub overlap: f64,
    /// Identity share of the newer version used for fine-tuning.
    pub finetune_fraction: f64,
    pub seed: u64,
}

impl Default for DecayStudy {
    fn default() -> Self {
        Self { identities: 40, videos_per_identity: 6, frames: 8, overlap: 0.25, finetune_fraction: 0.25, seed: 0 }
    }
}

/// Settings sized for a desktop CPU: a narrow network on 32-pixel crops and
/// a small recurrent head.
pub fn desk_scale_config(frames: usize) -> ExperimentConfig {
    ExperimentConfig {
        extraction: ExtractionConfig {
            box_side: 48,
            margin: 4,
            target_fps: 5.0,
            max_frames: frames,
            detector: DetectorConfig::ForegroundBlob(BlobConfig::default()),
        },
        frame: FrameModelConfig {
            width: 8,
            input_size: 32,
            init: Init::Random,
            frozen_blocks: Default::default(),
            learning_rate: 1e-3,
            early_stop_patience: 3,
            max_epochs: 12,
            batch_size: 32,
            ..Default::default()
        },
        augmentation: AugmentationPolicy {
            rotation: Rotation { p: 0.3, max_degrees: 10.0 },
            resize_crop: ResizeCrop { p: 0.3, min_scale: 0.9, max_scale: 1.1 },
            color_jitter: ColorJitter { p: 0.0, brightness: 0.2, contrast: 0.2, saturation: 0.2 },
            gaussian_blur: Blur { p: 0.0, min_sigma: 0.1, max_sigma: 2.0 },
            ..Default::default()
        },
        temporal: TemporalModelConfig {
            gru_layers: 2,
            hidden_dim: 32,
            fc_layers: 2,
            dropout: 0.1,
            target_length: frames,
            learning_rate: 1e-3,
            early_stop_patience: 5,
            max_epochs: 30,
            batch_size: 16,
            folds: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Writes `<root>/synth-a/`, `<root>/synth-b/` and `<root>/experiment.toml`,
/// an experiment that trains on the first version, evaluates on both and
/// fine-tunes on part of the second. Returns the config path.
pub fn generate_decay_study(root: &Path, study: &DecayStudy) -> Result<PathBuf> {
    let base = SyntheticConfig {
        identities: study.identities,
        videos_per_identity: study.videos_per_identity,
        frames: study.frames,
        seed: study.seed,
        ..Default::default()
    };
    generate_dataset(&root.join("synth-a"), &SyntheticConfig { version: "synth-a".into(), checker_share: 1.0, ..base.clone() })?;
    generate_dataset(&root.join("synth-b"), &SyntheticConfig { version: "synth-b".into(), checker_share: study.overlap, ..base })?;
    let config = ExperimentConfig {
        seed: study.seed,
        output_dir: "runs".into(),
        cache_root: "cache".into(),
        data: DataConfig {
            train_manifest: "synth-a/manifest.csv".into(),
            eval_manifests: vec!["synth-b/manifest.csv".into()],
            finetune_manifest: Some("synth-b/manifest.csv".into()),
            frame_val_fraction: 0.2,
            ..Default::default()
        },
        finetune: Some(FinetuneSection {
            stage1_init: true,
            plan: FinetunePlan {
                inits: Vec::new(),
                learning_rate: 1e-3,
                identity_fractions: vec![study.finetune_fraction],
                seeds: vec![study.seed],
                val_fraction: 0.3,
                max_epochs: Some(30),
                early_stop_patience: Some(6),
                ..Default::default()
            },
        }),
        ..desk_scale_config(study.frames)
    };
    let path = root.join("experiment.toml");
    write_atomic(&path, config.to_toml()?.as_bytes())?;
    Ok(path)
}
