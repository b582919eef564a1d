// SPDX-License-Identifier: MIT OR Apache-2.0

//! Manifest + blob tensor format and model directories.
//!
//! A model directory holds `config.json`, `tensors.json` (the manifest),
//! `tensors.bin` (little-endian row-major data), and optionally
//! `vocab.json` (token id to string).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelWeights, NamedTensors};

pub const CONFIG_FILE: &str = "config.json";
pub const TENSOR_HEADER: &str = "tensors.json";
pub const TENSOR_BLOB: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorDtype {
    F32,
    #[default]
    F64,
}

impl TensorDtype {
    pub fn size(self) -> usize {
        match self {
            TensorDtype::F32 => 4,
            TensorDtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for TensorDtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(TensorDtype::F32),
            "f64" => Ok(TensorDtype::F64),
            other => Err(Error::InvalidArgument(format!("unknown dtype `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: TensorDtype,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

impl TensorEntry {
    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

/// Serializes tensors back to back in the given order.
pub fn write_tensors(tensors: &[(String, Vec<usize>, Vec<f64>)], dtype: TensorDtype) -> Result<(String, Vec<u8>)> {
    let mut header = BTreeMap::new();
    let mut blob = Vec::new();
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch { name: name.clone(), expected: shape.clone(), got: vec![data.len()] });
        }
        header.insert(name.clone(), TensorEntry { dtype, shape: shape.clone(), byte_offset: blob.len() });
        for &x in data {
            match dtype {
                TensorDtype::F64 => blob.extend_from_slice(&x.to_le_bytes()),
                TensorDtype::F32 => blob.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    Ok((super::to_json_string(&header)?, blob))
}

/// Parses a manifest and its blob, checking offsets and lengths.
pub fn parse_tensors(header: &str, blob: &[u8]) -> Result<NamedTensors> {
    let entries: BTreeMap<String, TensorEntry> = serde_json::from_str(header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
    for (name, e) in &entries {
        let end = e
            .byte_offset
            .checked_add(e.byte_len())
            .ok_or_else(|| Error::MalformedHeader(format!("`{name}` extends past addressable range")))?;
        if end > blob.len() {
            return Err(Error::TruncatedBlob { name: name.clone(), needed: end, len: blob.len() });
        }
        spans.push((e.byte_offset, end, name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::OverlappingOffsets { first: w[0].2.to_string(), second: w[1].2.to_string() });
        }
    }
    let mut out = BTreeMap::new();
    for (name, e) in entries {
        let bytes = &blob[e.byte_offset..e.byte_offset + e.byte_len()];
        let data: Vec<f64> = match e.dtype {
            TensorDtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            TensorDtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
        };
        out.insert(name, (e.shape, data));
    }
    Ok(out)
}

pub fn read_tensors(header_path: &Path, blob_path: &Path) -> Result<NamedTensors> {
    let header = fs::read_to_string(header_path)?;
    let blob = fs::read(blob_path)?;
    parse_tensors(&header, &blob)
}

/// Writes a model directory, creating it if needed.
pub fn save_model(dir: &Path, model: &Model, dtype: TensorDtype, vocab: Option<&[String]>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(CONFIG_FILE), &model.config)?;
    let (header, blob) = write_tensors(&model.weights.named_tensors(), dtype)?;
    fs::write(dir.join(TENSOR_HEADER), header)?;
    fs::write(dir.join(TENSOR_BLOB), blob)?;
    if let Some(v) = vocab {
        if v.len() != model.config.vocab_size {
            return Err(Error::DimensionMismatch { context: "vocab file".into(), expected: model.config.vocab_size, got: v.len() });
        }
        write_json(&dir.join(VOCAB_FILE), v)?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    config.validate()?;
    let tensors = read_tensors(&dir.join(TENSOR_HEADER), &dir.join(TENSOR_BLOB))?;
    let weights = ModelWeights::from_named(&config, tensors)?;
    Model::new(config, weights)
}

/// The vocabulary file of a model directory, if present.
pub fn load_vocab(dir: &Path) -> Result<Option<Vec<String>>> {
    let path = dir.join(VOCAB_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_json(&path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> Vec<(String, Vec<usize>, Vec<f64>)> {
        vec![("a".into(), vec![2], vec![1.0, -0.5]), ("b".into(), vec![1, 2], vec![3.25, 1e-300])]
    }

    #[test]
    fn round_trip_f64_bit_exact() {
        let (h, b) = write_tensors(&two(), TensorDtype::F64).unwrap();
        let back = parse_tensors(&h, &b).unwrap();
        assert_eq!(back["a"], (vec![2], vec![1.0, -0.5]));
        assert_eq!(back["b"].1[1].to_bits(), 1e-300f64.to_bits());
    }

    #[test]
    fn round_trip_f32_value_exact() {
        let t = vec![("x".into(), vec![3], vec![0.1f32 as f64, -7.0, 1.5])];
        let (h, b) = write_tensors(&t, TensorDtype::F32).unwrap();
        assert_eq!(b.len(), 12);
        assert_eq!(parse_tensors(&h, &b).unwrap()["x"].1, t[0].2);
    }

    #[test]
    fn distinct_errors() {
        let (h, b) = write_tensors(&two(), TensorDtype::F64).unwrap();
        assert!(matches!(parse_tensors(&h, &b[..b.len() - 1]), Err(Error::TruncatedBlob { .. })));
        assert!(matches!(parse_tensors("{not json", &b), Err(Error::MalformedHeader(_))));
        let unknown_dtype = r#"{"a": {"dtype": "f16", "shape": [1], "byte_offset": 0}}"#;
        assert!(matches!(parse_tensors(unknown_dtype, &b), Err(Error::MalformedHeader(_))));
        let overlap = r#"{"a": {"dtype": "f64", "shape": [2], "byte_offset": 0},
                          "b": {"dtype": "f64", "shape": [1], "byte_offset": 8}}"#;
        assert!(matches!(parse_tensors(overlap, &b), Err(Error::OverlappingOffsets { .. })));
    }
}
