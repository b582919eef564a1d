// SPDX-License-Identifier: MIT OR Apache-2.0

//! Denoising activation patching.
//!
//! A corrupted run has one internal activation overwritten with its value
//! from the clean run; the last-position logit difference of the patched
//! run is the measured effect. Patching is single-node: everything
//! downstream of the patched value is recomputed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{ContrastivePair, Dataset, TEMPLATE_LEN, TEMPLATE_ROLES};
use crate::model::{logit_diff, ActivationCache, HookPoint, Intervention, Model};

/// Which family of activations a grid sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchTarget {
    /// layer x position
    ResidPreGrid,
    /// layer x position
    AttnOutGrid,
    /// layer x position
    MlpOutGrid,
    /// layer x head, at the last position
    HeadOutLastPos,
}

impl PatchTarget {
    pub const ALL: [PatchTarget; 4] =
        [PatchTarget::ResidPreGrid, PatchTarget::AttnOutGrid, PatchTarget::MlpOutGrid, PatchTarget::HeadOutLastPos];

    pub fn name(self) -> &'static str {
        match self {
            PatchTarget::ResidPreGrid => "resid_pre_grid",
            PatchTarget::AttnOutGrid => "attn_out_grid",
            PatchTarget::MlpOutGrid => "mlp_out_grid",
            PatchTarget::HeadOutLastPos => "head_out_last_pos",
        }
    }

    fn cols(self, model: &Model, seq_len: usize) -> usize {
        match self {
            PatchTarget::HeadOutLastPos => model.config.n_heads,
            _ => seq_len,
        }
    }

    fn hook(self, layer: usize, col: usize, seq_len: usize) -> HookPoint {
        match self {
            PatchTarget::ResidPreGrid => HookPoint::ResidPre { layer, pos: col },
            PatchTarget::AttnOutGrid => HookPoint::AttnOut { layer, pos: col },
            PatchTarget::MlpOutGrid => HookPoint::MlpOut { layer, pos: col },
            PatchTarget::HeadOutLastPos => HookPoint::HeadOut { layer, head: col, pos: seq_len - 1 },
        }
    }
}

impl std::str::FromStr for PatchTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resid_pre_grid" | "resid" | "a" => Ok(PatchTarget::ResidPreGrid),
            "attn_out_grid" | "attn" | "b" => Ok(PatchTarget::AttnOutGrid),
            "mlp_out_grid" | "mlp" | "c" => Ok(PatchTarget::MlpOutGrid),
            "head_out_last_pos" | "heads" | "d" => Ok(PatchTarget::HeadOutLastPos),
            other => Err(Error::InvalidArgument(format!("unknown patch family `{other}`"))),
        }
    }
}

/// How grid cells are scheduled. Both produce identical grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    Serial,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairBaseline {
    pub clean_ld: f64,
    pub corrupted_ld: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub per_pair: Vec<PairBaseline>,
    pub mean_clean_ld: f64,
    pub mean_corrupted_ld: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBaselines {
    pub mean_clean_ld: f64,
    pub mean_corrupted_ld: f64,
}

/// Dataset-averaged patching results for one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGrid {
    pub family: PatchTarget,
    pub model_id: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Mean patched logit difference.
    pub values_raw: Vec<Vec<f64>>,
    /// Mean of patched minus corrupted baseline.
    pub values_delta: Vec<Vec<f64>>,
    /// Mean of `(patched - corrupted) / (clean - corrupted)`.
    pub values_normalized: Vec<Vec<f64>>,
    pub baselines: GridBaselines,
}

impl PatchGrid {
    pub fn shape(&self) -> (usize, usize) {
        (self.values_raw.len(), self.col_labels.len())
    }

    /// Cell with the largest delta; ties resolve to the first in row-major order.
    pub fn argmax_delta(&self) -> (usize, usize) {
        argmax(&self.values_delta)
    }
}

pub(crate) fn argmax(values: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
    }
    best
}

fn last_ld(
    model: &Model,
    pair: &ContrastivePair,
    tokens: &crate::model::TokenSequence,
    ivs: &[Intervention],
) -> Result<(f64, ActivationCache)> {
    let out = model.forward(tokens, ivs)?;
    let ld = logit_diff(out.last_logits(), pair.g, pair.b)?;
    Ok((ld, out.cache))
}

/// Clean and corrupted last-position logit differences.
pub fn pair_baseline(model: &Model, pair: &ContrastivePair) -> Result<PairBaseline> {
    let (clean_ld, _) = last_ld(model, pair, &pair.clean, &[])?;
    let (corrupted_ld, _) = last_ld(model, pair, &pair.corrupted, &[])?;
    Ok(PairBaseline { clean_ld, corrupted_ld })
}

pub fn baseline_logit_diffs(model: &Model, dataset: &Dataset) -> Result<BaselineReport> {
    let per_pair = dataset.pairs.par_iter().map(|p| pair_baseline(model, p)).collect::<Result<Vec<_>>>()?;
    let n = per_pair.len() as f64;
    Ok(BaselineReport {
        mean_clean_ld: per_pair.iter().map(|b| b.clean_ld).sum::<f64>() / n,
        mean_corrupted_ld: per_pair.iter().map(|b| b.corrupted_ld).sum::<f64>() / n,
        per_pair,
    })
}

fn check_pair(pair: &ContrastivePair) -> Result<()> {
    if pair.clean.len() != pair.corrupted.len() {
        return Err(Error::DimensionMismatch {
            context: "clean vs corrupted length".into(),
            expected: pair.clean.len(),
            got: pair.corrupted.len(),
        });
    }
    Ok(())
}

fn patch_with_cache(model: &Model, pair: &ContrastivePair, clean: &ActivationCache, targets: &[HookPoint]) -> Result<f64> {
    let ivs = targets.iter().map(|t| Ok(Intervention::set(*t, clean.value(t)?))).collect::<Result<Vec<_>>>()?;
    Ok(last_ld(model, pair, &pair.corrupted, &ivs)?.0)
}

/// Corrupted run with `target` overwritten by its clean value; returns the
/// last-position logit difference.
pub fn patch_run(model: &Model, pair: &ContrastivePair, target: HookPoint) -> Result<f64> {
    patch_run_multi(model, pair, &[target])
}

/// Like [`patch_run`] but overwrites several hook points in the same run.
pub fn patch_run_multi(model: &Model, pair: &ContrastivePair, targets: &[HookPoint]) -> Result<f64> {
    check_pair(pair)?;
    for t in targets {
        t.validate(&model.config, pair.len())?;
    }
    let (_, clean) = last_ld(model, pair, &pair.clean, &[])?;
    patch_with_cache(model, pair, &clean, targets)
}

fn position_labels(seq_len: usize) -> Vec<String> {
    if seq_len == TEMPLATE_LEN {
        TEMPLATE_ROLES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..seq_len).map(|p| format!("pos{p}")).collect()
    }
}

/// Evaluates every cell of `family`, averaged over the dataset.
pub fn compute_grid(model: &Model, dataset: &Dataset, family: PatchTarget, schedule: Schedule) -> Result<PatchGrid> {
    if dataset.pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seq = dataset.seq_len();
    for p in &dataset.pairs {
        check_pair(p)?;
        if p.len() != seq {
            return Err(Error::RaggedDataset { first: seq, other: p.len() });
        }
    }
    let rows = model.config.n_layers;
    let cols = family.cols(model, seq);
    let cells = rows * cols;

    let per_pair = |pair: &ContrastivePair| -> Result<(PairBaseline, Vec<f64>)> {
        let (clean_ld, clean) = last_ld(model, pair, &pair.clean, &[])?;
        let (corrupted_ld, _) = last_ld(model, pair, &pair.corrupted, &[])?;
        let eval = |cell: usize| patch_with_cache(model, pair, &clean, &[family.hook(cell / cols, cell % cols, seq)]);
        let values = match schedule {
            Schedule::Serial => (0..cells).map(eval).collect::<Result<Vec<_>>>()?,
            Schedule::Parallel => (0..cells).into_par_iter().map(eval).collect::<Result<Vec<_>>>()?,
        };
        Ok((PairBaseline { clean_ld, corrupted_ld }, values))
    };
    let results = match schedule {
        Schedule::Serial => dataset.pairs.iter().map(per_pair).collect::<Result<Vec<_>>>()?,
        Schedule::Parallel => dataset.pairs.par_iter().map(per_pair).collect::<Result<Vec<_>>>()?,
    };

    let n = results.len() as f64;
    let mut raw = vec![0.0; cells];
    let mut delta = vec![0.0; cells];
    let mut norm = vec![0.0; cells];
    for (base, values) in &results {
        let gap = base.clean_ld - base.corrupted_ld;
        for (i, &v) in values.iter().enumerate() {
            raw[i] += v;
            delta[i] += v - base.corrupted_ld;
            // a pair with no clean/corrupted gap carries no normalized signal
            norm[i] += if gap != 0.0 { (v - base.corrupted_ld) / gap } else { 0.0 };
        }
    }
    let to_grid = |flat: Vec<f64>| -> Vec<Vec<f64>> { flat.chunks(cols).map(|r| r.iter().map(|v| v / n).collect()).collect() };
    let col_labels = match family {
        PatchTarget::HeadOutLastPos => (0..cols).map(|h| format!("H{h}")).collect(),
        _ => position_labels(seq),
    };
    Ok(PatchGrid {
        family,
        model_id: model.fingerprint(),
        row_labels: (0..rows).map(|l| format!("L{l}")).collect(),
        col_labels,
        values_raw: to_grid(raw),
        values_delta: to_grid(delta),
        values_normalized: to_grid(norm),
        baselines: GridBaselines {
            mean_clean_ld: results.iter().map(|(b, _)| b.clean_ld).sum::<f64>() / n,
            mean_corrupted_ld: results.iter().map(|(b, _)| b.corrupted_ld).sum::<f64>() / n,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{generate_dataset, toy_lexicon, Split};
    use crate::model::{ModelConfig, ModelWeights};

    fn random_model(seed: u64) -> (Model, Dataset) {
        let lex = toy_lexicon();
        let c = ModelConfig::toy(2, 2, 16, 4, 24, lex.vocab_size());
        let m = Model::new(c.clone(), ModelWeights::random(&c, seed)).unwrap();
        let ds = generate_dataset(&lex.spanish, 4, seed, Split::Train).unwrap();
        (m, ds)
    }

    #[test]
    fn full_input_substitution_gives_clean_ld() {
        let (m, ds) = random_model(1);
        let pair = &ds.pairs[0];
        let base = pair_baseline(&m, pair).unwrap();
        let all: Vec<_> = (0..pair.len()).map(|pos| HookPoint::ResidPre { layer: 0, pos }).collect();
        assert_eq!(patch_run_multi(&m, pair, &all).unwrap(), base.clean_ld);
        let last = HookPoint::ResidPost { layer: m.config.n_layers - 1, pos: pair.last_pos() };
        assert_eq!(patch_run(&m, pair, last).unwrap(), base.clean_ld);
    }

    #[test]
    fn out_of_range_position_is_an_error() {
        let (m, ds) = random_model(2);
        let err = patch_run(&m, &ds.pairs[0], HookPoint::AttnOut { layer: 0, pos: 6 }).unwrap_err();
        assert!(matches!(err, Error::InvalidHook { .. }));
    }

    #[test]
    fn single_pair_grid_matches_patch_run() {
        let (m, ds) = random_model(3);
        let one = Dataset::new(ds.language.clone(), ds.split, ds.seed, vec![ds.pairs[1].clone()]).unwrap();
        let grid = compute_grid(&m, &one, PatchTarget::HeadOutLastPos, Schedule::Serial).unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                let v = patch_run(&m, &one.pairs[0], HookPoint::HeadOut { layer, head, pos: 5 }).unwrap();
                assert_eq!(grid.values_raw[layer][head], v);
            }
        }
        assert_eq!(grid.col_labels, vec!["H0", "H1"]);
    }

    #[test]
    fn serial_and_parallel_grids_identical() {
        let (m, ds) = random_model(4);
        for fam in PatchTarget::ALL {
            let a = compute_grid(&m, &ds, fam, Schedule::Serial).unwrap();
            let b = compute_grid(&m, &ds, fam, Schedule::Parallel).unwrap();
            assert_eq!(a, b, "{fam:?}");
        }
    }

    #[test]
    fn family_parsing() {
        assert_eq!("head_out_last_pos".parse::<PatchTarget>().unwrap(), PatchTarget::HeadOutLastPos);
        assert_eq!("a".parse::<PatchTarget>().unwrap(), PatchTarget::ResidPreGrid);
        assert!("nope".parse::<PatchTarget>().is_err());
    }
}
