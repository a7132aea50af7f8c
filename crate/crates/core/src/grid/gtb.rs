//! GTB container: `"GTB1"` | u32 LE header length | UTF-8 JSON manifest |
//! little-endian f32 payload.
//!
//! Datasets store frames in time order, each `V×H×W` row-major with
//! variables in manifest order. Checkpoints reuse the container with
//! `"kind": "checkpoint"` (see `model::checkpoint`).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, TimeAxis};
use super::norm::NormStats;
use super::spec::GridSpec;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GTB1";
pub const DTYPE: &str = "f32";

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn encode_container(manifest: &serde_json::Value, payload: &[f32]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(manifest)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::invalid("manifest exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Splits a container into its manifest and payload; `expected_len` checks the
/// payload element count derived from the manifest.
pub fn decode_container(
    bytes: &[u8],
    expected_len: impl FnOnce(&serde_json::Value) -> Result<usize>,
) -> Result<(serde_json::Value, Vec<f32>)> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "file shorter than magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected \"GTB1\""));
    }
    if bytes.len() < 8 {
        return Err(format_err(bytes.len(), "truncated header length"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_start = 8 + header_len;
    if bytes.len() < payload_start {
        return Err(format_err(bytes.len(), format!(
            "truncated manifest: header declares {header_len} bytes"
        )));
    }
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| format_err(8 + e.column().saturating_sub(1), format!("invalid manifest: {e}")))?;
    let dtype = manifest.get("dtype").and_then(|d| d.as_str()).unwrap_or(DTYPE);
    if dtype != DTYPE {
        return Err(format_err(8, format!("unsupported dtype `{dtype}`")));
    }
    let expected = expected_len(&manifest).map_err(|e| match e {
        Error::Format { .. } => e,
        other => format_err(8, other.to_string()),
    })?;
    let payload = &bytes[payload_start..];
    if payload.len() != expected * 4 {
        let offset = if payload.len() < expected * 4 {
            bytes.len()
        } else {
            payload_start + expected * 4
        };
        return Err(format_err(offset, format!(
            "payload holds {} bytes, manifest declares {} f32 values",
            payload.len(),
            expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((manifest, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub dtype: String,
    pub grid: GridSpec,
    pub variables: Vec<String>,
    #[serde(default)]
    pub static_variables: Vec<String>,
    pub time: TimeAxis,
    #[serde(default)]
    pub norm_stats: Option<NormStats>,
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn of(ds: &Dataset) -> Self {
        DatasetManifest {
            kind: "dataset".into(),
            dtype: DTYPE.into(),
            grid: ds.grid.clone(),
            variables: ds.variables.clone(),
            static_variables: ds.static_variables.clone(),
            time: ds.time,
            norm_stats: ds.norm.clone(),
            generator: ds.generator.clone(),
        }
    }

    pub fn payload_len(&self) -> usize {
        self.time.count * self.variables.len() * self.grid.cells()
    }
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.variables.is_empty() {
        return Err(Error::invalid("refusing to write a dataset with no variables"));
    }
    let manifest = serde_json::to_value(DatasetManifest::of(ds))?;
    encode_container(&manifest, ds.data())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut parsed: Option<DatasetManifest> = None;
    let (_, data) = decode_container(bytes, |v| {
        let m: DatasetManifest = serde_json::from_value(v.clone())
            .map_err(|e| format_err(8, format!("invalid dataset manifest: {e}")))?;
        if m.kind != "dataset" {
            return Err(format_err(8, format!("expected kind \"dataset\", found \"{}\"", m.kind)));
        }
        let n = m.payload_len();
        parsed = Some(m);
        Ok(n)
    })?;
    let m = parsed.expect("manifest parsed before payload check");
    let mut ds = Dataset::new(m.grid, m.variables, m.time, data)?.with_static(m.static_variables)?;
    ds.norm = m.norm_stats;
    ds.generator = m.generator;
    Ok(ds)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> Dataset {
        let time = TimeAxis {
            start_hour: 12,
            step_hours: 6,
            count: 2,
        };
        let data = (0..2 * 2 * 8).map(|x| (x as f32).sin()).collect();
        Dataset::new(GridSpec::equiangular(2, 4), vec!["u".into(), "v".into()], time, data).unwrap()
    }

    #[test]
    fn layout_is_bit_exact() {
        let d = ds();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(&bytes[..4], b"GTB1");
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(manifest["kind"], "dataset");
        assert_eq!(manifest["dtype"], "f32");
        assert_eq!(manifest["variables"], serde_json::json!(["u", "v"]));
        let first = f32::from_le_bytes(bytes[8 + hlen..12 + hlen].try_into().unwrap());
        assert_eq!(first.to_bits(), d.data()[0].to_bits());
        assert_eq!(bytes.len(), 8 + hlen + 4 * d.data().len());
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let mut bytes = encode_dataset(&ds()).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        match decode_dataset(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, truncated.len()),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn empty_variable_list_rejected() {
        let time = TimeAxis {
            start_hour: 0,
            step_hours: 6,
            count: 3,
        };
        let d = Dataset::new(GridSpec::equiangular(2, 2), vec![], time, vec![]).unwrap();
        assert!(encode_dataset(&d).is_err());
    }
}
