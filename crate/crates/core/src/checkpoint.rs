//! Model checkpoints: one safetensors file holding every parameter and
//! buffer, with architecture tag, config, freeze map and training
//! provenance stored as JSON under a single metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "decay_bench";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub train_manifest_hash: String,
    pub epochs_trained: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Description of the starting point, e.g. a parent checkpoint hash.
    pub init: String,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: String,
    pub config: serde_json::Value,
    pub freeze_map: BTreeMap<String, bool>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut info = HashMap::new();
        info.insert(METADATA_KEY.to_string(), serde_json::to_string(&self.meta)?);
        let data: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        safetensors::serialize(data, Some(info))
            .map_err(|e| Error::IncompatibleCheckpoint(format!("cannot serialize checkpoint: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("not a safetensors file: {e}")))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::IncompatibleCheckpoint("file carries no checkpoint metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)?;
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?.into_iter().collect();
        Ok(Self { meta, tensors })
    }

    /// Writes the checkpoint and returns the SHA-256 of its bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        crate::artifact::write_atomic(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.config.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless_and_deterministic() {
        let mut tensors = BTreeMap::new();
        tensors.insert("b.weight".to_string(), Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap());
        tensors.insert("a.bias".to_string(), Tensor::new(&[0.5f32], &Device::Cpu).unwrap());
        let ckpt = ModelCheckpoint {
            meta: CheckpointMeta {
                arch: "test".into(),
                config: serde_json::json!({"lr": 1e-4, "classes": 2}),
                freeze_map: [("a.bias".to_string(), true), ("b.weight".to_string(), false)].into(),
                provenance: Provenance { epochs_trained: 3, best_val_loss: Some(0.25), ..Default::default() },
            },
            tensors,
        };
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(bytes, ckpt.to_bytes().unwrap());
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.tensors["b.weight"].to_vec2::<f32>().unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn rejects_plain_safetensors() {
        let t = Tensor::new(&[1f32], &Device::Cpu).unwrap();
        let bytes = safetensors::serialize([("x", &t)], None).unwrap();
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes), Err(Error::IncompatibleCheckpoint(_))));
    }
}
