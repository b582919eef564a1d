// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subject-number direction: extraction from head outputs, composition
//! with MLP weights, and steering.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Dataset, Number};
use crate::model::{logit_diff, HookPoint, Intervention, Model};
use crate::pca::{pca, PrincipalComponent};

/// Last-position head outputs with the subject number of each input.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSamples {
    /// `[n_samples, d_model]`
    pub rows: Array2<f64>,
    pub labels: Vec<Number>,
}

impl LabeledSamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_head(model: &Model, layer: usize, head: usize) -> Result<()> {
    if layer >= model.config.n_layers || head >= model.config.n_heads {
        return Err(Error::OutOfRange(format!("head L{layer}H{head}")));
    }
    Ok(())
}

/// Runs both sides of every pair unpatched and records `head_out` at the
/// last position. Rows alternate clean, corrupted.
pub fn collect_head_outputs(model: &Model, dataset: &Dataset, layer: usize, head: usize) -> Result<LabeledSamples> {
    check_head(model, layer, head)?;
    let d = model.config.d_model;
    let per_pair = dataset
        .pairs
        .par_iter()
        .map(|p| -> Result<[(Vec<f64>, Number); 2]> {
            let run = |tokens, number| -> Result<(Vec<f64>, Number)> {
                let out = model.forward(tokens, &[])?;
                let pos = out.cache.last_pos();
                Ok((out.cache.value(&HookPoint::HeadOut { layer, head, pos })?, number))
            };
            Ok([run(&p.clean, p.subject_number_clean)?, run(&p.corrupted, p.subject_number_clean.flip())?])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(per_pair.len() * 2 * d);
    let mut labels = Vec::with_capacity(per_pair.len() * 2);
    for (row, label) in per_pair.into_iter().flatten() {
        data.extend(row);
        labels.push(label);
    }
    let rows = Array2::from_shape_vec((labels.len(), d), data).expect("rows have d_model entries");
    Ok(LabeledSamples { rows, labels })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSource {
    pub layer: usize,
    pub head: usize,
    pub fit_dataset: String,
}

pub const SIGN_CONVENTION: &str = "mean plural projection >= mean singular projection";

/// A unit vector in residual space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Direction {
    pub vector: Vec<f64>,
    pub source: DirectionSource,
    pub explained_variance_ratio: f64,
    pub sign_convention: String,
}

impl Direction {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.vector.len() != d_model {
            return Err(Error::DimensionMismatch { context: "direction".into(), expected: d_model, got: self.vector.len() });
        }
        if self.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("direction".into()));
        }
        let norm = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("direction norm {norm} is not 1")));
        }
        Ok(())
    }
}

/// Principal components of labeled samples, each oriented so plural
/// samples project higher on average than singular ones.
pub fn oriented_components(samples: &LabeledSamples, k: usize) -> Result<Vec<PrincipalComponent>> {
    let mut pcs = pca(samples.rows.view(), k)?;
    for pc in &mut pcs {
        let proj = samples.rows.dot(&pc.vector);
        let mean_of = |n: Number| {
            let (sum, count) =
                proj.iter().zip(&samples.labels).filter(|(_, l)| **l == n).fold((0.0, 0usize), |(s, c), (p, _)| (s + p, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        };
        if mean_of(Number::Plur) < mean_of(Number::Sing) {
            pc.vector.mapv_inplace(|x| -x);
        }
    }
    Ok(pcs)
}

/// PC1 of a head's last-position outputs over `dataset`.
pub fn fit_direction(model: &Model, dataset: &Dataset, layer: usize, head: usize) -> Result<Direction> {
    let samples = collect_head_outputs(model, dataset, layer, head)?;
    let pc1 = oriented_components(&samples, 1)?.remove(0);
    Ok(Direction {
        vector: pc1.vector.to_vec(),
        source: DirectionSource { layer, head, fit_dataset: format!("{}/{}/seed{}", dataset.language, dataset.split, dataset.seed) },
        explained_variance_ratio: pc1.explained_variance_ratio,
        sign_convention: SIGN_CONVENTION.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    #[serde(rename = "W_in")]
    In,
    #[serde(rename = "W_gate")]
    Gate,
}

impl std::str::FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "W_in" | "w_in" | "in" => Ok(WeightKind::In),
            "W_gate" | "w_gate" | "gate" => Ok(WeightKind::Gate),
            other => Err(Error::InvalidArgument(format!("unknown weight `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composition {
    pub layer: usize,
    pub neuron: usize,
    pub which: WeightKind,
    pub dots: Vec<f64>,
    pub labels: Vec<Number>,
    pub mean_singular: f64,
    pub mean_plural: f64,
}

/// Dot product of each sample with an input-side weight column of a neuron.
pub fn neuron_composition(samples: &LabeledSamples, model: &Model, layer: usize, neuron: usize, which: WeightKind) -> Result<Composition> {
    let cfg = &model.config;
    if layer >= cfg.n_layers || neuron >= cfg.d_mlp {
        return Err(Error::OutOfRange(format!("neuron L{layer}N{neuron}")));
    }
    if samples.rows.ncols() != cfg.d_model {
        return Err(Error::DimensionMismatch { context: "head outputs".into(), expected: cfg.d_model, got: samples.rows.ncols() });
    }
    let lw = &model.weights.layers[layer];
    let column = match which {
        WeightKind::In => lw.w_in.column(neuron),
        WeightKind::Gate => lw.w_gate.column(neuron),
    };
    let dots = samples.rows.dot(&column).to_vec();
    let mean_of = |n: Number| {
        let v: Vec<f64> = dots.iter().zip(&samples.labels).filter(|(_, l)| **l == n).map(|(d, _)| *d).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(Composition {
        layer,
        neuron,
        which,
        mean_singular: mean_of(Number::Sing),
        mean_plural: mean_of(Number::Plur),
        dots,
        labels: samples.labels.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SteerSign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl SteerSign {
    pub fn factor(self) -> f64 {
        match self {
            SteerSign::Plus => 1.0,
            SteerSign::Minus => -1.0,
        }
    }

    /// `+` pushes toward plural, so it is applied to singular inputs.
    pub fn for_clean_number(n: Number) -> Self {
        match n {
            Number::Sing => SteerSign::Plus,
            Number::Plur => SteerSign::Minus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringSpec {
    pub direction: Direction,
    pub alpha: f64,
    /// `None` steers each pair toward the opposite number: `+` on singular,
    /// `-` on plural.
    pub sign: Option<SteerSign>,
    pub layer: usize,
    pub head: usize,
}

impl SteeringSpec {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidArgument(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        check_head(model, self.layer, self.head)?;
        self.direction.validate(model.config.d_model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeredPair {
    pub subject_number: Number,
    pub sign: SteerSign,
    pub pre_ld: f64,
    pub post_ld: f64,
    pub flipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSummary {
    pub count: usize,
    pub mean_pre_ld: f64,
    pub mean_post_ld: f64,
    pub flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringReport {
    pub model_id: String,
    pub dataset: String,
    pub alpha: f64,
    pub layer: usize,
    pub head: usize,
    pub singular: GroupSummary,
    pub plural: GroupSummary,
    pub flip_rate: f64,
    pub pairs: Vec<SteeredPair>,
}

impl SteeringReport {
    /// The lower of the two per-number flip rates; groups without
    /// examples are ignored.
    pub fn min_group_flip_rate(&self) -> f64 {
        [self.singular, self.plural].iter().filter(|g| g.count > 0).map(|g| g.flip_rate).fold(f64::INFINITY, f64::min).min(1.0)
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Flip iff the sign changed from a non-zero starting value. Landing on
/// exactly zero counts as a change.
pub fn is_flip(pre: f64, post: f64) -> bool {
    pre != 0.0 && sign(pre) != sign(post)
}

fn summarize(pairs: &[SteeredPair], n: Option<Number>) -> GroupSummary {
    let sel: Vec<&SteeredPair> = pairs.iter().filter(|p| n.map_or(true, |n| p.subject_number == n)).collect();
    let count = sel.len();
    if count == 0 {
        return GroupSummary { count, mean_pre_ld: 0.0, mean_post_ld: 0.0, flip_rate: 0.0 };
    }
    let c = count as f64;
    GroupSummary {
        count,
        mean_pre_ld: sel.iter().map(|p| p.pre_ld).sum::<f64>() / c,
        mean_post_ld: sel.iter().map(|p| p.post_ld).sum::<f64>() / c,
        flip_rate: sel.iter().filter(|p| p.flipped).count() as f64 / c,
    }
}

/// Adds `sign * alpha * direction` to the head output at the last position
/// of each clean input and reports the logit difference before and after.
pub fn steer(model: &Model, dataset: &Dataset, spec: &SteeringSpec) -> Result<SteeringReport> {
    spec.validate(model)?;
    if dataset.pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs = dataset
        .pairs
        .par_iter()
        .map(|p| -> Result<SteeredPair> {
            let sign = spec.sign.unwrap_or(SteerSign::for_clean_number(p.subject_number_clean));
            let pre = model.forward(&p.clean, &[])?;
            let pre_ld = logit_diff(pre.last_logits(), p.g, p.b)?;
            let target = HookPoint::HeadOut { layer: spec.layer, head: spec.head, pos: p.last_pos() };
            let delta: Vec<f64> = spec.direction.vector.iter().map(|x| sign.factor() * spec.alpha * x).collect();
            let post = model.forward(&p.clean, &[Intervention::add(target, delta)])?;
            let post_ld = logit_diff(post.last_logits(), p.g, p.b)?;
            Ok(SteeredPair { subject_number: p.subject_number_clean, sign, pre_ld, post_ld, flipped: is_flip(pre_ld, post_ld) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SteeringReport {
        model_id: model.fingerprint(),
        dataset: format!("{}/{}/seed{}", dataset.language, dataset.split, dataset.seed),
        alpha: spec.alpha,
        layer: spec.layer,
        head: spec.head,
        singular: summarize(&pairs, Some(Number::Sing)),
        plural: summarize(&pairs, Some(Number::Plur)),
        flip_rate: summarize(&pairs, None).flip_rate,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub alpha: f64,
    pub flip_rate: f64,
    pub min_group_flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSweep {
    pub model_id: String,
    pub dataset: String,
    pub chosen_alpha: f64,
    pub chosen_flip_rate: f64,
    pub points: Vec<SweepPoint>,
}

/// Absolute slack below the best flip rate within which the smallest α wins.
pub const SWEEP_TOLERANCE: f64 = 0.01;

/// Evaluates steering at each α on `validation` (opposite-number protocol)
/// and picks the smallest α whose flip rate is within [`SWEEP_TOLERANCE`]
/// of the best.
pub fn alpha_sweep(
    model: &Model,
    validation: &Dataset,
    direction: &Direction,
    layer: usize,
    head: usize,
    grid: &[f64],
) -> Result<AlphaSweep> {
    if validation.pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("alpha grid is empty".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let spec = SteeringSpec { direction: direction.clone(), alpha, sign: None, layer, head };
        let r = steer(model, validation, &spec)?;
        points.push(SweepPoint { alpha, flip_rate: r.flip_rate, min_group_flip_rate: r.min_group_flip_rate() });
    }
    let best = points.iter().map(|p| p.flip_rate).fold(f64::NEG_INFINITY, f64::max);
    let chosen = points
        .iter()
        .filter(|p| p.flip_rate >= best - SWEEP_TOLERANCE)
        .min_by(|a, b| a.alpha.total_cmp(&b.alpha))
        .copied()
        .expect("the best point qualifies");
    Ok(AlphaSweep {
        model_id: model.fingerprint(),
        dataset: format!("{}/{}/seed{}", validation.language, validation.split, validation.seed),
        chosen_alpha: chosen.alpha,
        chosen_flip_rate: chosen.flip_rate,
        points,
    })
}

/// Unit vector along `v`.
pub fn unit(v: &Array1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidArgument("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{generate_dataset, toy_lexicon, Split};
    use crate::model::{ModelConfig, ModelWeights};

    fn setup() -> (Model, Dataset) {
        let lex = toy_lexicon();
        let c = ModelConfig::toy(2, 2, 16, 4, 24, lex.vocab_size());
        let m = Model::new(c.clone(), ModelWeights::random(&c, 9)).unwrap();
        let ds = generate_dataset(&lex.english, 6, 1, Split::Train).unwrap();
        (m, ds)
    }

    #[test]
    fn two_rows_per_pair() {
        let (m, ds) = setup();
        let s = collect_head_outputs(&m, &ds, 1, 0).unwrap();
        assert_eq!(s.rows.dim(), (12, 16));
        assert_eq!(s.labels[0], ds.pairs[0].subject_number_clean);
        assert_eq!(s.labels[1], ds.pairs[0].subject_number_clean.flip());
        assert_eq!(s, collect_head_outputs(&m, &ds, 1, 0).unwrap());
        assert!(collect_head_outputs(&m, &ds, 2, 0).is_err());
    }

    #[test]
    fn direction_is_unit_and_oriented() {
        let (m, ds) = setup();
        let dir = fit_direction(&m, &ds, 1, 1).unwrap();
        dir.validate(16).unwrap();
        let s = collect_head_outputs(&m, &ds, 1, 1).unwrap();
        let proj = s.rows.dot(&Array1::from(dir.vector.clone()));
        let mean = |n| {
            let v: Vec<f64> = proj.iter().zip(&s.labels).filter(|(_, l)| **l == n).map(|(p, _)| *p).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(Number::Plur) >= mean(Number::Sing));
    }

    #[test]
    fn zero_alpha_changes_nothing() {
        let (m, ds) = setup();
        let dir = fit_direction(&m, &ds, 1, 1).unwrap();
        let r = steer(&m, &ds, &SteeringSpec { direction: dir, alpha: 0.0, sign: None, layer: 1, head: 1 }).unwrap();
        for p in &r.pairs {
            assert_eq!(p.pre_ld, p.post_ld);
            assert!(!p.flipped);
        }
        assert_eq!(r.flip_rate, 0.0);
    }

    #[test]
    fn flip_rule() {
        assert!(is_flip(1.0, -0.5));
        assert!(!is_flip(1.0, 0.5));
        assert!(!is_flip(0.0, -1.0));
        assert!(is_flip(-2.0, 0.0));
    }

    #[test]
    fn zero_grid_picks_zero() {
        let (m, ds) = setup();
        let dir = fit_direction(&m, &ds, 1, 1).unwrap();
        let s = alpha_sweep(&m, &ds, &dir, 1, 1, &[0.0]).unwrap();
        assert_eq!(s.chosen_alpha, 0.0);
        assert_eq!(s.chosen_flip_rate, 0.0);
        assert!(alpha_sweep(&m, &ds, &dir, 1, 1, &[]).is_err());
    }

    #[test]
    fn composition_of_zero_rows() {
        let (m, _) = setup();
        let s = LabeledSamples { rows: Array2::zeros((4, 16)), labels: vec![Number::Sing, Number::Plur, Number::Sing, Number::Plur] };
        let c = neuron_composition(&s, &m, 1, 3, WeightKind::Gate).unwrap();
        assert!(c.dots.iter().all(|&x| x == 0.0));
        assert!(neuron_composition(&s, &m, 1, 24, WeightKind::In).is_err());
    }

    #[test]
    fn steering_rejects_bad_spec() {
        let (m, ds) = setup();
        let mut dir = fit_direction(&m, &ds, 1, 1).unwrap();
        let bad_alpha = SteeringSpec { direction: dir.clone(), alpha: f64::NAN, sign: None, layer: 1, head: 1 };
        assert!(steer(&m, &ds, &bad_alpha).is_err());
        dir.vector[0] += 1.0;
        let bad_dir = SteeringSpec { direction: dir, alpha: 1.0, sign: None, layer: 1, head: 1 };
        assert!(steer(&m, &ds, &bad_dir).is_err());
    }
}
