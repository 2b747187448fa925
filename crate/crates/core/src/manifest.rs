//! Video corpora described as manifests, and every identity-level split,
//! subset and fold built from them.
//!
//! Splits never look at individual videos: identities are drawn first and a
//! video follows its identity, so no person can straddle a train/eval
//! boundary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{round_half_up, SeededRng};

pub const CSV_HEADER: [&str; 8] = [
    "video_id",
    "path",
    "label",
    "technique",
    "engine",
    "identity_id",
    "dataset_version",
    "split",
];

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} {other:?}, expected one of {:?}",
                        stringify!($name).to_lowercase(),
                        [$($text),+]
                    )),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(Label { Real => "real", Fake => "fake" });
string_enum!(Technique {
    Real => "real",
    FaceSwap => "face_swap",
    LipSync => "lip_sync",
    Avatar => "avatar",
});
string_enum!(Split { Train => "train", Test => "test" });
string_enum!(ClassScheme { Binary => "binary", Multiclass => "multiclass" });

impl ClassScheme {
    pub fn num_classes(self) -> usize {
        match self {
            ClassScheme::Binary => 2,
            ClassScheme::Multiclass => 4,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            ClassScheme::Binary => vec!["real".into(), "fake".into()],
            ClassScheme::Multiclass => Technique::ALL.iter().map(|t| t.as_str().to_string()).collect(),
        }
    }

    /// Class id of a video: `real=0, fake=1` in the binary scheme, the
    /// technique's position in `[real, face_swap, lip_sync, avatar]` otherwise.
    pub fn class_of(self, label: Label, technique: Technique) -> usize {
        match self {
            ClassScheme::Binary => match label {
                Label::Real => 0,
                Label::Fake => 1,
            },
            ClassScheme::Multiclass => match technique {
                Technique::Real => 0,
                Technique::FaceSwap => 1,
                Technique::LipSync => 2,
                Technique::Avatar => 3,
            },
        }
    }
}

impl Default for ClassScheme {
    fn default() -> Self {
        ClassScheme::Binary
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub technique: Technique,
    pub engine: String,
    pub identity_id: String,
    pub dataset_version: String,
    pub split: Split,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        let id = &self.video_id;
        if id.is_empty() {
            return Err(Error::Integrity("empty video_id".into()));
        }
        if id == "." || id == ".." || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Integrity(format!(
                "video_id {id:?} is not usable as a single path component"
            )));
        }
        if self.identity_id.is_empty() {
            return Err(Error::Integrity(format!("video {id}: empty identity_id")));
        }
        if self.path.as_os_str().is_empty() {
            return Err(Error::Integrity(format!("video {id}: empty path")));
        }
        let real_label = self.label == Label::Real;
        let real_technique = self.technique == Technique::Real;
        let no_engine = self.engine == "none";
        if real_label != real_technique || real_technique != no_engine {
            return Err(Error::Integrity(format!(
                "video {id}: label={}, technique={}, engine={:?} are inconsistent \
                 (real label, real technique and engine \"none\" must coincide)",
                self.label, self.technique, self.engine
            )));
        }
        Ok(())
    }

    pub fn class_id(&self, scheme: ClassScheme) -> usize {
        scheme.class_of(self.label, self.technique)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub version: String,
    #[serde(default)]
    pub class_scheme: ClassScheme,
    pub records: Vec<VideoRecord>,
    /// Directory relative video paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    /// Validates every record and the manifest-level invariants.
    pub fn new(records: Vec<VideoRecord>, class_scheme: ClassScheme) -> Result<Self> {
        let version = infer_version(&records);
        let manifest = Self { version, class_scheme, records, base_dir: None };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut identity_split: BTreeMap<&str, (Split, &str)> = BTreeMap::new();
        for record in &self.records {
            record.validate()?;
            if !seen.insert(record.video_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate video_id {}", record.video_id)));
            }
            match identity_split.get(record.identity_id.as_str()) {
                Some((split, first)) if *split != record.split => {
                    return Err(Error::Integrity(format!(
                        "identity {} appears in both {} (video {}) and {} (video {})",
                        record.identity_id, split, first, record.split, record.video_id
                    )));
                }
                Some(_) => {}
                None => {
                    identity_split.insert(&record.identity_id, (record.split, &record.video_id));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_class_scheme(mut self, scheme: ClassScheme) -> Self {
        self.class_scheme = scheme;
        self
    }

    /// Sorted, de-duplicated identity list.
    pub fn identities(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.identity_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn videos_per_identity(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.identity_id.clone()).or_insert(0) += 1;
        }
        counts
    }

    fn filtered(&self, keep: impl Fn(&VideoRecord) -> bool) -> DatasetManifest {
        DatasetManifest {
            version: self.version.clone(),
            class_scheme: self.class_scheme,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn partition(&self, split: Split) -> DatasetManifest {
        self.filtered(|r| r.split == split)
    }

    pub fn restrict_to_identities(&self, identities: &BTreeSet<String>) -> DatasetManifest {
        self.filtered(|r| identities.contains(&r.identity_id))
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id == video_id)
    }

    pub fn resolve_path(&self, record: &VideoRecord) -> PathBuf {
        match &self.base_dir {
            Some(base) if record.path.is_relative() => base.join(&record.path),
            _ => record.path.clone(),
        }
    }

    /// SHA-256 over the canonical JSON of version, class scheme and records.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        writer.write_record(CSV_HEADER).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            writer
                .write_record([
                    r.video_id.as_str(),
                    &r.path.to_string_lossy(),
                    r.label.as_str(),
                    r.technique.as_str(),
                    &r.engine,
                    &r.identity_id,
                    &r.dataset_version,
                    r.split.as_str(),
                ])
                .map_err(|e| csv_io(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

fn infer_version(records: &[VideoRecord]) -> String {
    let versions: BTreeSet<&str> = records.iter().map(|r| r.dataset_version.as_str()).collect();
    match versions.len() {
        0 => String::new(),
        1 => versions.into_iter().next().unwrap().to_string(),
        _ => versions.into_iter().collect::<Vec<_>>().join("+"),
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Parse { location: path.display().to_string(), message: e.to_string() }
}

/// Loads a CSV manifest, or its JSON mirror when the extension is `.json`.
/// Relative video paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let mut manifest = if is_json { parse_json(path, &bytes)? } else { parse_csv(path, &bytes)? };
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    manifest.validate()?;
    Ok(manifest)
}

fn parse_json(path: &Path, bytes: &[u8]) -> Result<DatasetManifest> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Bare(Vec<VideoRecord>),
        Full(DatasetManifest),
    }
    let doc: Doc = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(match doc {
        Doc::Bare(records) => DatasetManifest {
            version: infer_version(&records),
            class_scheme: ClassScheme::Binary,
            records,
            base_dir: None,
        },
        Doc::Full(mut m) => {
            if m.version.is_empty() {
                m.version = infer_version(&m.records);
            }
            m
        }
    })
}

fn parse_csv(path: &Path, bytes: &[u8]) -> Result<DatasetManifest> {
    let loc = |line: u64| format!("{}:{line}", path.display());
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let header: Vec<&str> = header.iter().map(str::trim).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse {
            location: loc(1),
            message: format!("expected header {:?}, found {:?}", CSV_HEADER.join(","), header.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_io(path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let parse = |i: usize| -> Result<String> { Ok(field(i).to_string()) };
        let bad = |name: &str, msg: String| Error::Parse { location: loc(line), message: format!("{name}: {msg}") };
        records.push(VideoRecord {
            video_id: parse(0)?,
            path: PathBuf::from(field(1)),
            label: field(2).parse().map_err(|m| bad("label", m))?,
            technique: field(3).parse().map_err(|m| bad("technique", m))?,
            engine: parse(4)?,
            identity_id: parse(5)?,
            dataset_version: parse(6)?,
            split: field(7).parse().map_err(|m| bad("split", m))?,
        });
    }
    Ok(DatasetManifest {
        version: infer_version(&records),
        class_scheme: ClassScheme::Binary,
        records,
        base_dir: None,
    })
}

/// Builds a manifest by walking `<root>/<split>/<technique>/<engine>/<identity_id>/<video file>`.
/// Real videos live under `<split>/real/none/...`. The video id is the path
/// below `root` with separators replaced by `_` and the extension dropped.
pub fn scan_directory(root: &Path, dataset_version: &str, extensions: &[&str]) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Parse { location: root.display().to_string(), message: e.to_string() })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext = entry.path().extension().and_then(|e| e.to_str()).unwrap_or("");
        if !extensions.iter().any(|x| x.eq_ignore_ascii_case(ext)) {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays below root");
        let parts: Vec<&str> = rel.iter().filter_map(|p| p.to_str()).collect();
        if parts.len() != 5 {
            return Err(Error::Parse {
                location: rel.display().to_string(),
                message: "expected <split>/<technique>/<engine>/<identity_id>/<file>".into(),
            });
        }
        let bad = |m: String| Error::Parse { location: rel.display().to_string(), message: m };
        let split: Split = parts[0].parse().map_err(bad)?;
        let technique: Technique = parts[1].parse().map_err(bad)?;
        let stem = rel.with_extension("");
        let video_id = stem.iter().filter_map(|p| p.to_str()).collect::<Vec<_>>().join("_");
        records.push(VideoRecord {
            video_id,
            path: rel.to_path_buf(),
            label: if technique == Technique::Real { Label::Real } else { Label::Fake },
            technique,
            engine: parts[2].to_string(),
            identity_id: parts[3].to_string(),
            dataset_version: dataset_version.to_string(),
            split,
        });
    }
    let mut manifest = DatasetManifest::new(records, ClassScheme::Binary)?;
    manifest.base_dir = Some(root.to_path_buf());
    Ok(manifest)
}

/// Identity-level partition of one source partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySplit {
    pub train_identities: BTreeSet<String>,
    pub held_identities: BTreeSet<String>,
    pub seed: u64,
}

impl IdentitySplit {
    /// `(training videos, held-out videos)` of `manifest` under this split.
    pub fn apply(&self, manifest: &DatasetManifest) -> (DatasetManifest, DatasetManifest) {
        (
            manifest.restrict_to_identities(&self.train_identities),
            manifest.restrict_to_identities(&self.held_identities),
        )
    }
}

fn shuffled_identities(identities: Vec<String>, seed: u64, purpose: &str) -> Vec<String> {
    let mut ids = identities;
    SeededRng::derive(seed, &["identities", purpose]).shuffle(&mut ids);
    ids
}

/// Holds out `round(val_fraction * n)` identities of the train partition,
/// clamped to `[1, n - 1]`.
pub fn split_identities(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<IdentitySplit> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let identities = manifest.partition(Split::Train).identities();
    let n = identities.len();
    if n < 2 {
        return Err(Error::TooFewIdentities { needed: 2, found: n });
    }
    let held = round_half_up(val_fraction * n as f64).clamp(1, n - 1);
    let order = shuffled_identities(identities, seed, "validation");
    Ok(IdentitySplit {
        held_identities: order[..held].iter().cloned().collect(),
        train_identities: order[held..].iter().cloned().collect(),
        seed,
    })
}

/// Keeps all videos of `round(fraction * n)` (at least one) uniformly drawn
/// identities.
pub fn subset_by_identity_fraction(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction must lie in (0, 1], got {fraction}")));
    }
    let identities = manifest.identities();
    let n = identities.len();
    if n == 0 {
        return Ok(manifest.clone());
    }
    let keep = round_half_up(fraction * n as f64).clamp(1, n);
    let order = shuffled_identities(identities, seed, "subset");
    let selected: BTreeSet<String> = order[..keep].iter().cloned().collect();
    Ok(manifest.restrict_to_identities(&selected))
}

/// `k` folds over the train partition's identities; held sets partition the
/// identities and differ in size by at most one.
pub fn kfold_identity_splits(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<IdentitySplit>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let identities = manifest.partition(Split::Train).identities();
    let n = identities.len();
    if n < k {
        return Err(Error::TooFewIdentities { needed: k, found: n });
    }
    let order = shuffled_identities(identities, seed, "kfold");
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let held: BTreeSet<String> = order[start..start + size].iter().cloned().collect();
        let train: BTreeSet<String> = order.iter().filter(|id| !held.contains(*id)).cloned().collect();
        folds.push(IdentitySplit { train_identities: train, held_identities: held, seed });
        start += size;
    }
    Ok(folds)
}
