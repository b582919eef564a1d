// SPDX-License-Identifier: MIT OR Apache-2.0

//! Handcrafted models with a known subject-number circuit.
//!
//! The residual stream reserves four orthonormal directions:
//!
//! * `d`: subject number, `+1` plural and `-1` singular on subject nouns;
//! * `m`: subject marker, present on subject nouns only;
//! * `e_b`: a bias direction carried by every token;
//! * `v`: the verb-number readout.
//!
//! The copy head queries with `e_b` and keys on `m`, so every later position
//! attends to the subject noun, and it copies the `d` component there scaled
//! by the write scale. Reader neurons in a later MLP read `d` and write `v`;
//! plural answer verbs unembed along `+v` and singular ones along `-v` in
//! both languages. Every other token identity lives in the complement of
//! the reserved subspace, which keeps the circuit exact when noise is off.

use std::fmt;

use ndarray::{s, Array1};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::{NeuronReport, Sign};
use crate::directions::{Direction, SteeringReport};
use crate::error::{Error, Result};
use crate::grammar::{toy_lexicon, LanguageSpec, Number, SUBJECT_SLOT, TEMPLATE_LEN};
use crate::model::{Activation, EmbedScale, Model, ModelConfig, ModelWeights, NormOffset, TokenId};
use crate::patching::{PatchGrid, PatchTarget};
use crate::pca::cosine;

/// Attention logit margin of the subject over every other position.
const SCORE_GAP: f64 = 30.0;
/// Norm of every token embedding.
const EMBED_NORM: f64 = 2.0;
/// Magnitude of answer-verb unembeddings along `v`.
const ANSWER_SCALE: f64 = 1.0;
/// Norm of non-answer unembedding columns.
const OTHER_UNEMBED_NORM: f64 = 0.5;
/// Output weight of a one-sided neuron relative to the main readers.
const ONE_SIDED_WEIGHT: f64 = 0.5;
/// Tolerance for user-supplied directions.
const FRAME_TOL: f64 = 1e-10;

pub const DEFAULT_WRITE_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Default architecture of planted models for a given vocabulary.
pub fn planted_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        d_mlp: 256,
        vocab_size,
        max_seq: 16,
        rope_base: None,
        norm_eps: 1e-6,
        activation: Activation::GeluTanhApprox,
        embed_scale: EmbedScale::None,
        norm_offset: NormOffset::PlainGamma,
        tied_embeddings: false,
    }
}

/// Everything needed to build a planted model.
///
/// With `Activation::Identity` the reader neurons use a constant gate, which
/// makes the path from the copy head to the logits linear; pair it with a
/// large `norm_eps` (see [`PlantedCircuitSpec::linear`]) so the norms are
/// effectively constant too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedCircuitSpec {
    pub config: ModelConfig,
    pub copy_head: HeadId,
    pub reader_layer: usize,
    /// Random when absent.
    pub number_direction: Option<Vec<f64>>,
    /// Random when absent.
    pub subject_marker: Option<Vec<f64>>,
    pub write_scale: f64,
    pub n_distractor_heads_with_noise: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl PlantedCircuitSpec {
    /// Default GELU model with noise at 2% of the write scale.
    pub fn new(seed: u64) -> Self {
        let config = planted_config(toy_lexicon().vocab_size());
        let n_heads = config.n_layers * config.n_heads;
        Self {
            config,
            copy_head: HeadId { layer: 2, head: 1 },
            reader_layer: 3,
            number_direction: None,
            subject_marker: None,
            write_scale: DEFAULT_WRITE_SCALE,
            n_distractor_heads_with_noise: n_heads - 1,
            noise_std: 0.02 * DEFAULT_WRITE_SCALE,
            seed,
        }
    }

    /// Noise-free model whose steering response is linear.
    pub fn linear(seed: u64) -> Self {
        let mut spec = Self::new(seed).with_noise(0.0);
        spec.config.activation = Activation::Identity;
        spec.config.norm_eps = 1e12;
        spec
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn linear_regime(&self) -> bool {
        self.config.activation == Activation::Identity
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(format!("planted: {m}")));
        let lexicon = toy_lexicon().vocab_size();
        if c.vocab_size < lexicon {
            return bad(format!("vocab_size {} is below the lexicon size {lexicon}", c.vocab_size));
        }
        if c.rope_base.is_some() {
            return bad("attention is content-keyed; rope_base must be null".into());
        }
        if c.tied_embeddings {
            return bad("tied embeddings are not supported".into());
        }
        if c.d_model < 8 || c.d_head < 2 || c.d_mlp < 4 {
            return bad("needs d_model >= 8, d_head >= 2, d_mlp >= 4".into());
        }
        if c.max_seq < TEMPLATE_LEN {
            return bad(format!("max_seq must be at least {TEMPLATE_LEN}"));
        }
        if self.copy_head.layer >= self.reader_layer || self.reader_layer >= c.n_layers {
            return bad(format!("need copy layer {} < reader layer {} < n_layers {}", self.copy_head.layer, self.reader_layer, c.n_layers));
        }
        if self.copy_head.head >= c.n_heads {
            return bad(format!("copy head {} out of range", self.copy_head));
        }
        if !(self.write_scale.is_finite() && self.write_scale > 0.0) {
            return bad("write_scale must be positive".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        if self.n_distractor_heads_with_noise > c.n_layers * c.n_heads - 1 {
            return bad("more noisy heads than non-planted heads".into());
        }
        for (name, v) in [("number_direction", &self.number_direction), ("subject_marker", &self.subject_marker)] {
            if let Some(v) = v {
                if v.len() != c.d_model {
                    return Err(Error::DimensionMismatch { context: name.into(), expected: c.d_model, got: v.len() });
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (n - 1.0).abs() > FRAME_TOL {
                    return bad(format!("{name} has norm {n}, expected 1"));
                }
            }
        }
        if let (Some(d), Some(m)) = (&self.number_direction, &self.subject_marker) {
            let dot: f64 = d.iter().zip(m).map(|(a, b)| a * b).sum();
            if dot.abs() > FRAME_TOL {
                return bad(format!("number_direction and subject_marker are not orthogonal (dot {dot:e})"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReaderNeurons {
    pub plural: usize,
    pub singular: usize,
    /// Gate reads `+d`, input reads `-d`; fires only on plural subjects.
    pub one_sided_plural: Option<usize>,
    /// Mirror image of `one_sided_plural`.
    pub one_sided_singular: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromotedExpectation {
    pub neuron: usize,
    pub sign: Sign,
    /// Answer verbs that must rank at the top, ascending id.
    pub tokens: Vec<TokenId>,
}

/// Ground truth emitted alongside a planted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedOracle {
    pub model_id: String,
    pub copy_head: HeadId,
    pub reader_layer: usize,
    pub reader_neurons: ReaderNeurons,
    pub number_direction: Vec<f64>,
    pub subject_marker: Vec<f64>,
    pub promoted: Vec<PromotedExpectation>,
    pub subject_position: usize,
    pub write_scale: f64,
    pub noise_std: f64,
    pub linear_regime: bool,
}

#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub model: Model,
    pub oracle: PlantedOracle,
    pub english: LanguageSpec,
    pub spanish: LanguageSpec,
    /// Token id to word.
    pub vocab: Vec<String>,
}

/// Orthonormal basis whose first four vectors are `d, m, e_b, v`.
fn frame(spec: &PlantedCircuitSpec, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let dim = spec.config.d_model;
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(dim);
    let push_orthogonal = |basis: &mut Vec<Array1<f64>>, mut v: Array1<f64>| -> bool {
        for _ in 0..2 {
            for b in basis.iter() {
                let c = v.dot(b);
                v.scaled_add(-c, b);
            }
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-6 {
            return false;
        }
        basis.push(v / n);
        true
    };
    let gaussian = |rng: &mut ChaCha8Rng| -> Array1<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };
    for given in [&spec.number_direction, &spec.subject_marker] {
        match given {
            // validated: unit length and orthogonal to the other given vector
            Some(v) => basis.push(Array1::from(v.clone())),
            None => while !push_orthogonal(&mut basis, gaussian(rng)) {},
        }
    }
    if spec.number_direction.is_none() && spec.subject_marker.is_some() {
        // d was drawn before m was known; re-orthogonalize it against m
        let m = basis[1].clone();
        let mut d = basis[0].clone();
        let c = d.dot(&m);
        d.scaled_add(-c, &m);
        basis[0] = &d / d.dot(&d).sqrt();
    }
    while basis.len() < dim {
        push_orthogonal(&mut basis, gaussian(rng));
    }
    basis
}

struct Frame {
    d: Array1<f64>,
    m: Array1<f64>,
    e_b: Array1<f64>,
    v: Array1<f64>,
    complement: Vec<Array1<f64>>,
}

impl Frame {
    fn random_unit(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let mut out = Array1::zeros(self.d.len());
        for c in &self.complement {
            let z: f64 = StandardNormal.sample(rng);
            out.scaled_add(z, c);
        }
        let n = out.dot(&out).sqrt();
        out / n
    }
}

/// Builds the planted model, its oracle, and the two toy languages.
pub fn build_planted_model(spec: &PlantedCircuitSpec) -> Result<PlantedModel> {
    spec.validate()?;
    let cfg = &spec.config;
    let lex = toy_lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut basis = frame(spec, &mut rng);
    let complement = basis.split_off(4);
    let fr = Frame { d: basis[0].clone(), m: basis[1].clone(), e_b: basis[2].clone(), v: basis[3].clone(), complement };
    let dim = cfg.d_model as f64;
    let w = spec.write_scale;
    let linear = spec.linear_regime();
    // Effective norm scale: large in the linear regime so that x * gamma / rms(x) ~ x.
    let gamma = if linear { cfg.norm_eps.sqrt() } else { 1.0 };
    let gain = |norm_sq: f64| gamma / (norm_sq / dim + cfg.norm_eps).sqrt();

    let mut weights = ModelWeights::zeros(cfg);
    let raw_gamma = cfg.norm_offset.raw_for(gamma);
    for lw in &mut weights.layers {
        lw.attn_norm.fill(raw_gamma);
        lw.mlp_norm.fill(raw_gamma);
    }
    weights.final_norm.fill(raw_gamma);

    // Embeddings.
    let mut subject_number = vec![None; cfg.vocab_size];
    for lang in [&lex.english, &lex.spanish] {
        for pair in &lang.subject_nouns {
            subject_number[lang.id(&pair.sing)? as usize] = Some(Number::Sing);
            subject_number[lang.id(&pair.plur)? as usize] = Some(Number::Plur);
        }
    }
    let mult = cfg.embed_multiplier();
    for (t, number) in subject_number.iter().enumerate() {
        let u = fr.random_unit(&mut rng);
        let mut e = fr.e_b.clone();
        match number {
            Some(n) => {
                e += &fr.m;
                e.scaled_add(n.sign(), &fr.d);
                e += &u;
            }
            None => e.scaled_add(3f64.sqrt(), &u),
        }
        weights.embed.row_mut(t).assign(&(e / mult));
    }

    // Copy head.
    let s_in = gain(EMBED_NORM * EMBED_NORM);
    let a = (SCORE_GAP * (cfg.d_head as f64).sqrt()).sqrt() / s_in;
    {
        let HeadId { layer, head } = spec.copy_head;
        let lw = &mut weights.layers[layer];
        lw.w_q.slice_mut(s![head, .., 0]).assign(&(&fr.e_b * a));
        lw.w_k.slice_mut(s![head, .., 0]).assign(&(&fr.m * a));
        lw.w_v.slice_mut(s![head, .., 1]).assign(&(&fr.d / s_in));
        lw.w_o.slice_mut(s![head, 1, ..]).assign(&(&fr.d * w));
    }

    // Reader neurons.
    let picks = index::sample(&mut rng, cfg.d_mlp, 4).into_vec();
    let g_r = gain(EMBED_NORM * EMBED_NORM + w * w);
    let read_d = &fr.d / g_r;
    let read_bias = &fr.e_b / g_r;
    let reader = {
        let lw = &mut weights.layers[spec.reader_layer];
        let mut plant = |n: usize, gate: Array1<f64>, input: Array1<f64>, out: f64| {
            lw.w_gate.column_mut(n).assign(&gate);
            lw.w_in.column_mut(n).assign(&input);
            lw.w_out.row_mut(n).assign(&(&fr.v * out));
        };
        if linear {
            // gate = +-1, input = sigma * w; each neuron writes sigma * v
            plant(picks[0], read_bias.clone(), read_d.clone(), 1.0 / w);
            plant(picks[1], -&read_bias, read_d.clone(), -1.0 / w);
            ReaderNeurons { plural: picks[0], singular: picks[1], one_sided_plural: None, one_sided_singular: None }
        } else {
            // firing neurons reach |act| ~ w^2
            let o = 1.0 / (w * w);
            plant(picks[0], read_d.clone(), read_d.clone(), o);
            plant(picks[1], -&read_d, -&read_d, -o);
            plant(picks[2], read_d.clone(), -&read_d, -ONE_SIDED_WEIGHT * o);
            plant(picks[3], -&read_d, read_d.clone(), ONE_SIDED_WEIGHT * o);
            ReaderNeurons { plural: picks[0], singular: picks[1], one_sided_plural: Some(picks[2]), one_sided_singular: Some(picks[3]) }
        }
    };

    // Unembedding.
    let answers = |n: Number| -> Vec<TokenId> {
        let mut v = vec![*lex.english.answer_verbs.get(n), *lex.spanish.answer_verbs.get(n)];
        v.sort_unstable();
        v
    };
    for t in 0..cfg.vocab_size {
        let col = if answers(Number::Plur).contains(&(t as TokenId)) {
            &fr.v * ANSWER_SCALE
        } else if answers(Number::Sing).contains(&(t as TokenId)) {
            &fr.v * -ANSWER_SCALE
        } else {
            fr.random_unit(&mut rng) * OTHER_UNEMBED_NORM
        };
        weights.unembed.column_mut(t).assign(&col);
    }

    add_noise(spec, &mut weights, &reader, &mut rng);

    let model = Model::new(cfg.clone(), weights)?;
    let promoted = vec![
        PromotedExpectation { neuron: reader.plural, sign: Sign::Positive, tokens: answers(Number::Plur) },
        PromotedExpectation { neuron: reader.plural, sign: Sign::Negative, tokens: answers(Number::Sing) },
        PromotedExpectation { neuron: reader.singular, sign: Sign::Positive, tokens: answers(Number::Sing) },
        PromotedExpectation { neuron: reader.singular, sign: Sign::Negative, tokens: answers(Number::Plur) },
    ];
    let oracle = PlantedOracle {
        model_id: model.fingerprint(),
        copy_head: spec.copy_head,
        reader_layer: spec.reader_layer,
        reader_neurons: reader,
        number_direction: fr.d.to_vec(),
        subject_marker: fr.m.to_vec(),
        promoted,
        subject_position: SUBJECT_SLOT,
        write_scale: w,
        noise_std: spec.noise_std,
        linear_regime: linear,
    };
    Ok(PlantedModel { model, oracle, english: lex.english, spanish: lex.spanish, vocab: lex.vocab })
}

/// Fan-in scaled Gaussian noise on distractor heads and non-reader neurons.
fn add_noise(spec: &PlantedCircuitSpec, weights: &mut ModelWeights, reader: &ReaderNeurons, rng: &mut ChaCha8Rng) {
    let cfg = &spec.config;
    let sigma = spec.noise_std;
    let normal = |fan_in: usize| Normal::new(0.0, sigma / (fan_in as f64).sqrt()).expect("finite std");
    let (by_d, by_dh, by_dm) = (normal(cfg.d_model), normal(cfg.d_head), normal(cfg.d_mlp));

    let mut heads: Vec<HeadId> = (0..cfg.n_layers)
        .flat_map(|layer| (0..cfg.n_heads).map(move |head| HeadId { layer, head }))
        .filter(|h| *h != spec.copy_head)
        .collect();
    heads.shuffle(rng);
    heads.truncate(spec.n_distractor_heads_with_noise);
    heads.sort_by_key(|h| (h.layer, h.head));
    for HeadId { layer, head } in heads {
        let lw = &mut weights.layers[layer];
        for t in [&mut lw.w_q, &mut lw.w_k, &mut lw.w_v] {
            t.slice_mut(s![head, .., ..]).mapv_inplace(|_| by_d.sample(rng));
        }
        lw.w_o.slice_mut(s![head, .., ..]).mapv_inplace(|_| by_dh.sample(rng));
    }

    let planted = [Some(reader.plural), Some(reader.singular), reader.one_sided_plural, reader.one_sided_singular];
    for (layer, lw) in weights.layers.iter_mut().enumerate() {
        for n in 0..cfg.d_mlp {
            if layer == spec.reader_layer && planted.contains(&Some(n)) {
                continue;
            }
            lw.w_gate.column_mut(n).mapv_inplace(|_| by_d.sample(rng));
            lw.w_in.column_mut(n).mapv_inplace(|_| by_d.sample(rng));
            lw.w_out.row_mut(n).mapv_inplace(|_| by_dm.sample(rng));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleReport {
    pub model_id: String,
    pub passed: bool,
    pub criteria: Vec<CriterionResult>,
}

/// Analysis artifacts produced on a planted model.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisOutputs<'a> {
    pub head_grid: &'a PatchGrid,
    pub neurons: &'a NeuronReport,
    pub pc1: &'a Direction,
    pub steering: &'a [SteeringReport],
}

pub const MIN_PC1_COSINE: f64 = 0.99;
pub const MIN_FLIP_RATE: f64 = 0.95;

/// Scores analysis outputs against the planted ground truth.
pub fn oracle_check(oracle: &PlantedOracle, outputs: AnalysisOutputs<'_>) -> Result<OracleReport> {
    let ids = std::iter::once(&outputs.head_grid.model_id)
        .chain(std::iter::once(&outputs.neurons.model_id))
        .chain(outputs.steering.iter().map(|r| &r.model_id));
    for id in ids {
        if *id != oracle.model_id {
            return Err(Error::ModelMismatch { expected: oracle.model_id.clone(), got: id.clone() });
        }
    }
    let grid = outputs.head_grid;
    if grid.family != PatchTarget::HeadOutLastPos {
        return Err(Error::InvalidArgument(format!(
            "oracle check needs a {} grid, got {}",
            PatchTarget::HeadOutLastPos.name(),
            grid.family.name()
        )));
    }
    if outputs.neurons.layer != oracle.reader_layer {
        return Err(Error::InvalidArgument(format!(
            "neuron report is for layer {}, reader layer is {}",
            outputs.neurons.layer, oracle.reader_layer
        )));
    }
    if outputs.steering.is_empty() {
        return Err(Error::InvalidArgument("oracle check needs at least one steering report".into()));
    }
    let mut criteria = Vec::with_capacity(4);

    // (i) localization
    let (r, c) = grid.argmax_delta();
    let HeadId { layer, head } = oracle.copy_head;
    let planted = grid.values_delta.get(layer).and_then(|row| row.get(head)).copied().unwrap_or(f64::NAN);
    let other = grid
        .values_delta
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().map(move |(h, v)| ((l, h), *v)))
        .filter(|(at, _)| *at != (layer, head))
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    criteria.push(CriterionResult {
        name: "head_localization".into(),
        passed: (r, c) == (layer, head),
        measured: planted - other,
        threshold: 0.0,
        detail: format!("argmax L{r}H{c}, planted {} delta {planted:.6}, largest other |delta| {other:.6}", oracle.copy_head),
    });

    // (ii) reader neurons on top
    let readers = [oracle.reader_neurons.plural, oracle.reader_neurons.singular];
    let ranked = outputs.neurons.ranked_by_magnitude();
    let top: Vec<usize> = ranked.iter().take(readers.len()).copied().collect();
    let vals = &outputs.neurons.values;
    let reader_min = readers.iter().map(|&n| vals.get(n).map_or(0.0, |v| v.abs())).fold(f64::INFINITY, f64::min);
    let rest_max = ranked.iter().filter(|n| !readers.contains(n)).map(|&n| vals[n].abs()).fold(0.0, f64::max);
    criteria.push(CriterionResult {
        name: "reader_neurons".into(),
        passed: readers.iter().all(|n| top.contains(n)),
        measured: reader_min - rest_max,
        threshold: 0.0,
        detail: format!("top neurons {top:?}, readers {readers:?}, smallest reader |dlda| {reader_min:.6}, largest other {rest_max:.6}"),
    });

    // (iii) direction recovery
    let cos = cosine(&outputs.pc1.vector, &oracle.number_direction).abs();
    criteria.push(CriterionResult {
        name: "direction_recovery".into(),
        passed: cos >= MIN_PC1_COSINE,
        measured: cos,
        threshold: MIN_PC1_COSINE,
        detail: format!("|cos(PC1, d)| = {cos:.9}"),
    });

    // (iv) steering
    let rate = outputs.steering.iter().map(|r| r.min_group_flip_rate()).fold(f64::INFINITY, f64::min);
    criteria.push(CriterionResult {
        name: "steering_flip_rate".into(),
        passed: rate >= MIN_FLIP_RATE,
        measured: rate,
        threshold: MIN_FLIP_RATE,
        detail: format!(
            "minimum per-number flip rate over {} report(s): {}",
            outputs.steering.len(),
            outputs.steering.iter().map(|r| format!("{} at alpha {}", r.dataset, r.alpha)).collect::<Vec<_>>().join("; ")
        ),
    });

    Ok(OracleReport { model_id: oracle.model_id.clone(), passed: criteria.iter().all(|c| c.passed), criteria })
}
