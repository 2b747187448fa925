//! Per-video embedding matrices and their on-disk store:
//! `<cache_root>/emb/<extractor_fingerprint>/<video_id>.npy` with a JSON
//! sidecar of the same stem.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json, write_atomic, write_json_atomic};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub video_id: String,
    /// `T x D`, rows in timestamp order.
    pub embeddings: Array2<f32>,
    pub label: usize,
    pub identity_id: String,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub video_id: String,
    pub rows: usize,
    pub dim: usize,
    pub order: String,
    pub timestamps: Vec<f64>,
    pub label: usize,
    pub identity_id: String,
    pub extractor_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dir: PathBuf,
    fingerprint: String,
}

impl EmbeddingStore {
    pub fn new(cache_root: &Path, extractor_fingerprint: &str) -> Self {
        Self { dir: cache_root.join("emb").join(extractor_fingerprint), fingerprint: extractor_fingerprint.into() }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn matrix_path(&self, video_id: &str) -> PathBuf {
        self.dir.join(format!("{video_id}.npy"))
    }

    fn sidecar_path(&self, video_id: &str) -> PathBuf {
        self.dir.join(format!("{video_id}.json"))
    }

    /// The sidecar is written last, so its presence marks a complete entry.
    pub fn contains(&self, video_id: &str) -> bool {
        self.sidecar_path(video_id).exists()
    }

    pub fn save(&self, seq: &EmbeddingSequence, timestamps: &[f64]) -> Result<()> {
        if timestamps.len() != seq.len() {
            return Err(Error::Precondition(format!(
                "video {}: {} timestamps for {} embedding rows",
                seq.video_id,
                timestamps.len(),
                seq.len()
            )));
        }
        let mut bytes = Vec::new();
        seq.embeddings
            .write_npy(&mut bytes)
            .map_err(|e| Error::Precondition(format!("cannot encode embeddings: {e}")))?;
        write_atomic(&self.matrix_path(&seq.video_id), &bytes)?;
        let sidecar = EmbeddingSidecar {
            video_id: seq.video_id.clone(),
            rows: seq.len(),
            dim: seq.dim(),
            order: "timestamp".into(),
            timestamps: timestamps.to_vec(),
            label: seq.label,
            identity_id: seq.identity_id.clone(),
            extractor_fingerprint: self.fingerprint.clone(),
        };
        write_json_atomic(&self.sidecar_path(&seq.video_id), &sidecar)
    }

    pub fn sidecar(&self, video_id: &str) -> Result<EmbeddingSidecar> {
        read_json(&self.sidecar_path(video_id))
    }

    pub fn load(&self, video_id: &str) -> Result<EmbeddingSequence> {
        if !self.contains(video_id) {
            return Err(Error::MissingEmbeddings(vec![video_id.to_string()]));
        }
        let sidecar = self.sidecar(video_id)?;
        let path = self.matrix_path(video_id);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let embeddings = Array2::<f32>::read_npy(file)
            .map_err(|e| Error::Parse { location: path.display().to_string(), message: e.to_string() })?;
        if embeddings.dim() != (sidecar.rows, sidecar.dim) {
            return Err(Error::Integrity(format!("embedding matrix of {video_id} disagrees with its sidecar")));
        }
        Ok(EmbeddingSequence { video_id: sidecar.video_id, embeddings, label: sidecar.label, identity_id: sidecar.identity_id })
    }

    /// Ids among `video_ids` that have no stored embeddings.
    pub fn missing<'a>(&self, video_ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        video_ids.into_iter().filter(|id| !self.contains(id)).map(str::to_string).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = EmbeddingStore::new(dir.path(), "abc");
        let seq = EmbeddingSequence {
            video_id: "v1".into(),
            embeddings: Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 * 0.1),
            label: 1,
            identity_id: "p1".into(),
        };
        store.save(&seq, &[0.0, 0.2, 0.4]).unwrap();
        assert_eq!(store.load("v1").unwrap(), seq);
        assert_eq!(store.missing(["v1", "v2"]), vec!["v2".to_string()]);
        assert!(dir.path().join("emb/abc/v1.npy").exists());
        assert!(matches!(store.load("v2"), Err(Error::MissingEmbeddings(_))));
    }
}
