use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_json, write_json_atomic};
use crate::knowledge::EntitySet;

pub const CHECKPOINT_FORMAT: &str = "kavl-checkpoint-v1";
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub entities: EntitySet,
    pub params: Vec<ParamEntry>,
}

impl Model {
    /// Writes `manifest.json` and `params.bin` (little-endian f64) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::with_capacity(self.params.num_scalars() * 8);
        let mut offset = 0;
        for (_, name, t) in self.params.iter() {
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: "f64-le".into(),
            config: self.config,
            vocab: self.vocab.clone(),
            entities: self.entities.clone(),
            params: entries,
        };
        atomic_write(&dir.join(PAYLOAD), &payload)?;
        write_json_atomic(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let fail = |reason: String| Error::Format {
            path: manifest_path.display().to_string(),
            reason,
        };
        let manifest: CheckpointManifest = read_json(&manifest_path)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f64-le" {
            return Err(fail(format!(
                "unsupported checkpoint {} / {}",
                manifest.format, manifest.dtype
            )));
        }
        let bytes = std::fs::read(dir.join(PAYLOAD))?;
        if bytes.len() % 8 != 0 {
            return Err(fail("payload length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut model = Model::new(manifest.config, manifest.vocab, manifest.entities, 0)?;
        if manifest.params.len() != model.params.len() {
            return Err(fail(format!(
                "{} parameters stored, model has {}",
                manifest.params.len(),
                model.params.len()
            )));
        }
        for entry in &manifest.params {
            let id = model
                .params
                .find(&entry.name)
                .ok_or_else(|| fail(format!("unknown parameter `{}`", entry.name)))?;
            let t = model.params.get_mut(id);
            if t.shape() != entry.shape.as_slice() {
                return Err(fail(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let end = entry.offset + t.len();
            let src = values
                .get(entry.offset..end)
                .ok_or_else(|| fail(format!("parameter `{}` runs past the payload", entry.name)))?;
            t.data_mut().copy_from_slice(src);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_model;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = tiny_model();
        let id = m.params.find("cls_head.fc2.weight").unwrap();
        m.params.get_mut(id).data_mut()[0] = std::f64::consts::PI;
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.entities, m.entities);
        for ((_, n1, t1), (_, n2, t2)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let m = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let p = dir.path().join(PAYLOAD);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(Model::load(dir.path()).is_err());
    }
}
