// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats: tensor manifests, model directories, datasets, JSON
//! artifacts, CSV tables, and SVG heatmaps.
//!
//! JSON is always written with sorted keys and a trailing newline so that
//! artifacts are byte-stable across runs.

mod dataset;
mod heatmap;
mod tensors;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;
use crate::patching::PatchGrid;

pub use dataset::{dataset_meta_path, load_dataset, read_dataset_jsonl, save_dataset, write_dataset_jsonl, DatasetMeta, PairRecord};
pub use heatmap::{grid_to_svg, GridView};
pub use tensors::{
    load_model, load_vocab, parse_tensors, read_tensors, save_model, write_tensors, TensorDtype, TensorEntry, CONFIG_FILE, TENSOR_BLOB,
    TENSOR_HEADER, VOCAB_FILE,
};

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // Going through `Value` sorts object keys (serde_json's map is ordered).
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// `values` as CSV with a leading label column.
pub fn matrix_to_csv(corner: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![corner.to_string()];
    header.extend(col_labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in row_labels.iter().zip(values) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One view of a patching grid as CSV.
pub fn grid_to_csv(grid: &PatchGrid, view: GridView) -> Result<String> {
    matrix_to_csv("layer", &grid.row_labels, &grid.col_labels, view.values(grid))
}
