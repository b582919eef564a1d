// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset JSONL (one pair per line) with a metadata sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::grammar::{ContrastivePair, Dataset, Number, Split, SUBJECT_SLOT};
use crate::model::{TokenId, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub clean_ids: Vec<TokenId>,
    pub corrupted_ids: Vec<TokenId>,
    pub g: TokenId,
    pub b: TokenId,
    pub subject_number: Number,
    pub token_labels: Vec<String>,
}

impl From<&ContrastivePair> for PairRecord {
    fn from(p: &ContrastivePair) -> Self {
        Self {
            clean_ids: p.clean.0.clone(),
            corrupted_ids: p.corrupted.0.clone(),
            g: p.g,
            b: p.b,
            subject_number: p.subject_number_clean,
            token_labels: p.token_labels.clone(),
        }
    }
}

impl From<PairRecord> for ContrastivePair {
    fn from(r: PairRecord) -> Self {
        Self {
            clean: TokenSequence::new(r.clean_ids),
            corrupted: TokenSequence::new(r.corrupted_ids),
            g: r.g,
            b: r.b,
            subject_number_clean: r.subject_number,
            subject_position: SUBJECT_SLOT,
            token_labels: r.token_labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub language: String,
    pub split: Split,
    pub seed: u64,
    pub n_pairs: usize,
}

/// `data.jsonl` -> `data.meta.json`.
pub fn dataset_meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn write_dataset_jsonl(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    for p in &ds.pairs {
        let v = serde_json::to_value(PairRecord::from(p))?;
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_dataset_jsonl(text: &str, meta: DatasetMeta) -> Result<Dataset> {
    let pairs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(ContrastivePair::from(serde_json::from_str::<PairRecord>(l)?)))
        .collect::<Result<Vec<_>>>()?;
    if pairs.len() != meta.n_pairs {
        return Err(Error::DimensionMismatch { context: "dataset pair count".into(), expected: meta.n_pairs, got: pairs.len() });
    }
    Dataset::new(meta.language, meta.split, meta.seed, pairs)
}

/// Writes the JSONL file and its sidecar; returns the sidecar path.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::write(path, write_dataset_jsonl(ds)?)?;
    let meta_path = dataset_meta_path(path);
    let meta = DatasetMeta { language: ds.language.clone(), split: ds.split, seed: ds.seed, n_pairs: ds.pairs.len() };
    write_json(&meta_path, &meta)?;
    Ok(meta_path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&dataset_meta_path(path))?;
    read_dataset_jsonl(&fs::read_to_string(path)?, meta)
}
