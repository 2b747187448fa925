//! Uniform temporal sampling, face cropping and the on-disk frame cache.
//!
//! Cache layout: `<cache_root>/<config_fingerprint>/<video_id>/frame_<k>.png`
//! plus `meta.json`. A video whose extraction failed gets a `failed.json`
//! instead, so re-runs do not retry it. Entries are built in a temporary
//! sibling directory and renamed into place.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::{imageops, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{Detection, DetectorConfig, FaceDetector};
use crate::error::{Error, Result};
use crate::manifest::{ClassScheme, DatasetManifest, Label, Technique, VideoRecord};
use crate::video::open_video;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub box_side: u32,
    pub margin: u32,
    pub target_fps: f64,
    pub max_frames: usize,
    pub detector: DetectorConfig,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { box_side: 320, margin: 16, target_fps: 5.0, max_frames: 50, detector: DetectorConfig::default() }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.box_side == 0 || self.margin >= self.box_side {
            return Err(Error::Config(format!(
                "extraction needs box_side > margin >= 0 (box_side={}, margin={})",
                self.box_side, self.margin
            )));
        }
        if !(self.target_fps > 0.0 && self.target_fps.is_finite()) {
            return Err(Error::Config(format!("target_fps must be positive, got {}", self.target_fps)));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be at least 1".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the config's JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub source_duration: f64,
    pub config_fingerprint: String,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &RgbImage> {
        self.frames.iter().map(|f| &f.image)
    }
}

/// `n = min(floor(duration * fps), max_frames)`, at least 1, spaced
/// `duration / n` apart from 0.
pub fn sample_frame_times(duration: f64, target_fps: f64, max_frames: usize) -> Vec<f64> {
    assert!(duration > 0.0, "duration must be positive");
    let n = ((duration * target_fps + 1e-9).floor() as usize).min(max_frames).max(1);
    let stride = duration / n as f64;
    (0..n).map(|i| i as f64 * stride).collect()
}

/// Square crop of `box_side` pixels around a detection, widened by a margin
/// that amounts to `margin` pixels after resizing. Returns `None` when the
/// clipped window is empty.
pub fn crop_face(image: &RgbImage, det: &Detection, box_side: u32, margin: u32) -> Option<RgbImage> {
    let [x1, y1, x2, y2] = det.bbox;
    let scale = margin as f32 / (box_side - margin) as f32;
    let (mx, my) = ((x2 - x1) * scale, (y2 - y1) * scale);
    let (w, h) = (image.width() as f32, image.height() as f32);
    let left = (x1 - mx / 2.0).max(0.0) as u32;
    let top = (y1 - my / 2.0).max(0.0) as u32;
    let right = (x2 + mx / 2.0).min(w) as u32;
    let bottom = (y2 + my / 2.0).min(h) as u32;
    if right <= left || bottom <= top {
        return None;
    }
    let view = imageops::crop_imm(image, left, top, right - left, bottom - top).to_image();
    if view.dimensions() == (box_side, box_side) {
        return Some(view);
    }
    Some(imageops::resize(&view, box_side, box_side, imageops::FilterType::Triangle))
}

/// Samples, detects and crops one video. Frames where no face is found are
/// dropped.
pub fn extract_faces(
    video_path: &Path,
    video_id: &str,
    config: &ExtractionConfig,
    detector: &dyn FaceDetector,
) -> Result<FrameSet> {
    config.validate()?;
    let mut source = open_video(video_path)?;
    let info = source.info();
    let duration = info.duration();
    let mut frames = Vec::new();
    let mut decoded_any = false;
    for t in sample_frame_times(duration, config.target_fps, config.max_frames) {
        let Ok(image) = source.frame(info.nearest_frame(t)) else {
            tracing::warn!(video_id, timestamp = t, "frame not decodable, skipped");
            continue;
        };
        decoded_any = true;
        let best = detector.detect(&image)?.into_iter().next();
        match best.and_then(|d| crop_face(&image, &d, config.box_side, config.margin)) {
            Some(crop) => frames.push(Frame { timestamp: t, image: crop }),
            None => tracing::debug!(video_id, timestamp = t, "no face in sampled frame"),
        }
    }
    if !decoded_any {
        return Err(Error::Decode { path: video_path.to_path_buf(), message: "no sampled frame decodable".into() });
    }
    if frames.is_empty() {
        return Err(Error::NoFaces(video_id.to_string()));
    }
    Ok(FrameSet { video_id: video_id.into(), frames, source_duration: duration, config_fingerprint: config.fingerprint() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameSetMeta {
    video_id: String,
    config_fingerprint: String,
    source_duration: f64,
    timestamps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedFailure {
    pub kind: String,
    pub message: String,
}

pub enum CacheEntry {
    Frames(FrameSet),
    Failed(CachedFailure),
}

#[derive(Debug, Clone)]
pub struct FrameCache {
    root: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FrameCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_dir(&self, fingerprint: &str, video_id: &str) -> PathBuf {
        self.root.join(fingerprint).join(video_id)
    }

    pub fn frame_path(&self, fingerprint: &str, video_id: &str, k: usize) -> PathBuf {
        self.entry_dir(fingerprint, video_id).join(format!("frame_{k}.png"))
    }

    pub fn load(&self, fingerprint: &str, video_id: &str) -> Result<Option<CacheEntry>> {
        let dir = self.entry_dir(fingerprint, video_id);
        let failed = dir.join("failed.json");
        if failed.exists() {
            let bytes = std::fs::read(&failed).map_err(|e| Error::io(&failed, e))?;
            return Ok(Some(CacheEntry::Failed(serde_json::from_slice(&bytes)?)));
        }
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: FrameSetMeta = serde_json::from_slice(&bytes)?;
        let frames = meta
            .timestamps
            .iter()
            .enumerate()
            .map(|(k, &timestamp)| {
                let image = image::open(self.frame_path(fingerprint, video_id, k))?.to_rgb8();
                Ok(Frame { timestamp, image })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(CacheEntry::Frames(FrameSet {
            video_id: meta.video_id,
            frames,
            source_duration: meta.source_duration,
            config_fingerprint: meta.config_fingerprint,
        })))
    }

    fn publish(&self, fingerprint: &str, video_id: &str, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let parent = self.root.join(fingerprint);
        std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let tmp = parent.join(format!(
            ".tmp-{video_id}-{}-{}",
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        fill(&tmp)?;
        let dest = parent.join(video_id);
        if let Err(e) = std::fs::rename(&tmp, &dest) {
            // another writer got there first; its entry is equivalent
            let _ = std::fs::remove_dir_all(&tmp);
            if !dest.exists() {
                return Err(Error::io(&dest, e));
            }
        }
        Ok(())
    }

    pub fn store(&self, set: &FrameSet) -> Result<()> {
        self.publish(&set.config_fingerprint, &set.video_id, |dir| {
            for (k, frame) in set.frames.iter().enumerate() {
                frame.image.save(dir.join(format!("frame_{k}.png")))?;
            }
            let meta = FrameSetMeta {
                video_id: set.video_id.clone(),
                config_fingerprint: set.config_fingerprint.clone(),
                source_duration: set.source_duration,
                timestamps: set.frames.iter().map(|f| f.timestamp).collect(),
            };
            let path = dir.join("meta.json");
            std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
        })
    }

    pub fn store_failure(&self, fingerprint: &str, video_id: &str, failure: &CachedFailure) -> Result<()> {
        self.publish(fingerprint, video_id, |dir| {
            let path = dir.join("failed.json");
            std::fs::write(&path, serde_json::to_vec_pretty(failure)?).map_err(|e| Error::io(&path, e))
        })
    }
}

/// Extraction result for one video, served from cache when possible.
/// Returns the outcome and whether it was a cache hit.
pub fn extract_cached(
    cache: &FrameCache,
    manifest: &DatasetManifest,
    record: &VideoRecord,
    config: &ExtractionConfig,
    detector: &dyn FaceDetector,
) -> Result<(std::result::Result<FrameSet, CachedFailure>, bool)> {
    let fp = config.fingerprint();
    match cache.load(&fp, &record.video_id)? {
        Some(CacheEntry::Frames(set)) => return Ok((Ok(set), true)),
        Some(CacheEntry::Failed(f)) => return Ok((Err(f), true)),
        None => {}
    }
    match extract_faces(&manifest.resolve_path(record), &record.video_id, config, detector) {
        Ok(set) => {
            cache.store(&set)?;
            Ok((Ok(set), false))
        }
        Err(e @ (Error::Decode { .. } | Error::NoFaces(_))) => {
            let failure = CachedFailure { kind: e.kind().into(), message: e.to_string() };
            cache.store_failure(&fp, &record.video_id, &failure)?;
            Ok((Err(failure), false))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub video_id: String,
    pub frame: usize,
    pub timestamp: f64,
    /// Relative to the cache root.
    pub path: PathBuf,
    pub label: Label,
    pub technique: Technique,
    pub identity_id: String,
    pub dataset_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedVideo {
    pub video_id: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub config_fingerprint: String,
    pub manifest_hash: String,
    pub class_scheme: ClassScheme,
    pub frames: Vec<FrameEntry>,
    pub skipped: Vec<SkippedVideo>,
}

impl FrameIndex {
    pub fn video_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for f in &self.frames {
            if ids.last() != Some(&f.video_id) {
                ids.push(f.video_id.clone());
            }
        }
        ids
    }

    pub fn identities(&self) -> std::collections::BTreeSet<String> {
        self.frames.iter().map(|f| f.identity_id.clone()).collect()
    }

    pub fn class_of(&self, entry: &FrameEntry) -> usize {
        self.class_scheme.class_of(entry.label, entry.technique)
    }

    /// Frames belonging to the given identities, in index order.
    pub fn restrict_to_identities(&self, identities: &std::collections::BTreeSet<String>) -> FrameIndex {
        FrameIndex {
            frames: self.frames.iter().filter(|f| identities.contains(&f.identity_id)).cloned().collect(),
            skipped: Vec::new(),
            ..self.clone()
        }
    }

    /// Frames of the videos listed in `manifest`.
    pub fn restrict_to_manifest(&self, manifest: &DatasetManifest) -> FrameIndex {
        let ids: std::collections::BTreeSet<&str> = manifest.records.iter().map(|r| r.video_id.as_str()).collect();
        FrameIndex {
            frames: self.frames.iter().filter(|f| ids.contains(f.video_id.as_str())).cloned().collect(),
            skipped: Vec::new(),
            class_scheme: manifest.class_scheme,
            ..self.clone()
        }
    }

    /// Loads the cached frames of one video as a FrameSet.
    pub fn frame_set(&self, cache_root: &Path, video_id: &str) -> Result<FrameSet> {
        let frames = self
            .frames
            .iter()
            .filter(|f| f.video_id == video_id)
            .map(|f| Ok(Frame { timestamp: f.timestamp, image: image::open(cache_root.join(&f.path))?.to_rgb8() }))
            .collect::<Result<Vec<_>>>()?;
        if frames.is_empty() {
            return Err(Error::EmptyInput(format!("no indexed frames for video {video_id}")));
        }
        let meta_path = cache_root.join(&self.config_fingerprint).join(video_id).join("meta.json");
        let bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: FrameSetMeta = serde_json::from_slice(&bytes)?;
        Ok(FrameSet {
            video_id: video_id.into(),
            frames,
            source_duration: meta.source_duration,
            config_fingerprint: self.config_fingerprint.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub cache_hits: usize,
    pub computed: usize,
}

/// Extracts every video of `manifest` with `workers` parallel extractors.
/// Per-video failures land in the index's skip list.
pub fn build_frame_dataset(
    manifest: &DatasetManifest,
    config: &ExtractionConfig,
    cache: &FrameCache,
    workers: usize,
) -> Result<(FrameIndex, ExtractionStats)> {
    config.validate()?;
    let fp = config.fingerprint();
    let detector = config.detector.build()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start extraction workers: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|record| {
                let outcome = extract_cached(cache, manifest, record, config, detector.as_ref());
                (record, outcome)
            })
            .collect()
    });

    let mut index = FrameIndex {
        config_fingerprint: fp.clone(),
        manifest_hash: manifest.content_hash(),
        class_scheme: manifest.class_scheme,
        frames: Vec::new(),
        skipped: Vec::new(),
    };
    let mut stats = ExtractionStats::default();
    for (record, outcome) in outcomes {
        let (result, hit) = match outcome {
            Ok(v) => v,
            Err(e) => {
                // an error outside the decode/detect path, e.g. a cache write failure
                tracing::error!(video_id = %record.video_id, error = %e, "extraction failed");
                index.skipped.push(SkippedVideo {
                    video_id: record.video_id.clone(),
                    kind: e.kind().into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        if hit {
            stats.cache_hits += 1;
        } else {
            stats.computed += 1;
        }
        match result {
            Ok(set) => {
                for (k, frame) in set.frames.iter().enumerate() {
                    index.frames.push(FrameEntry {
                        video_id: record.video_id.clone(),
                        frame: k,
                        timestamp: frame.timestamp,
                        path: PathBuf::from(&fp).join(&record.video_id).join(format!("frame_{k}.png")),
                        label: record.label,
                        technique: record.technique,
                        identity_id: record.identity_id.clone(),
                        dataset_version: record.dataset_version.clone(),
                    });
                }
            }
            Err(failure) => {
                tracing::warn!(video_id = %record.video_id, kind = %failure.kind, "video skipped");
                index.skipped.push(SkippedVideo {
                    video_id: record.video_id.clone(),
                    kind: failure.kind,
                    message: failure.message,
                });
            }
        }
    }
    tracing::info!(cache_hits = stats.cache_hits, computed = stats.computed, skipped = index.skipped.len(), "frame dataset built");
    Ok((index, stats))
}
