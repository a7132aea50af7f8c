//! Checkpoints share the GTB container with datasets: the manifest records
//! the model configuration and the ordered parameter table, the payload is
//! every parameter concatenated in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::grid::gtb::{decode_container, encode_container, DTYPE};
use crate::tensor::{numel, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    dtype: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    /// Free-form provenance: normalization statistics, step counts, seeds.
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(ck.params.len());
    let mut payload = Vec::with_capacity(ck.params.num_elements());
    for (name, t) in ck.params.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
        payload.extend_from_slice(t.data());
    }
    let manifest = CheckpointManifest {
        kind: "checkpoint".into(),
        dtype: DTYPE.into(),
        config: ck.config.clone(),
        params: entries,
        meta: ck.meta.clone(),
    };
    encode_container(&serde_json::to_value(manifest)?, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut parsed = None;
    let (_, payload) = decode_container(bytes, |v| {
        let m: CheckpointManifest = serde_json::from_value(v.clone()).map_err(|e| Error::Format {
            offset: 8,
            reason: format!("invalid checkpoint manifest: {e}"),
        })?;
        if m.kind != "checkpoint" {
            return Err(Error::Format {
                offset: 8,
                reason: format!("expected kind \"checkpoint\", found \"{}\"", m.kind),
            });
        }
        let n = m.params.iter().map(|p| numel(&p.shape)).sum();
        parsed = Some(m);
        Ok(n)
    })?;
    let m = parsed.expect("manifest parsed before payload check");
    let mut params = ParamStore::new();
    let mut offset = 0;
    for p in m.params {
        let n = numel(&p.shape);
        params.insert(p.name, Tensor::new(p.shape, payload[offset..offset + n].to_vec())?);
        offset += n;
    }
    Ok(Checkpoint {
        config: m.config,
        params,
        meta: m.meta,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VariableVocabulary;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::toy(VariableVocabulary::new(["t", "z"]).unwrap());
        let params = init_params::<f32>(&cfg, 3).unwrap();
        let ck = Checkpoint {
            config: cfg,
            params,
            meta: serde_json::json!({"step": 12}),
        };
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn dataset_file_is_not_a_checkpoint() {
        let ds = crate::grid::Dataset::new(
            crate::grid::GridSpec::equiangular(2, 2),
            vec!["a".into()],
            crate::grid::TimeAxis {
                start_hour: 0,
                step_hours: 6,
                count: 1,
            },
            vec![0.0; 4],
        )
        .unwrap();
        let bytes = crate::grid::gtb::encode_dataset(&ds).unwrap();
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { .. })));
    }
}
