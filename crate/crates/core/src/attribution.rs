// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct logit-difference attribution (DLDA) and weight-space readouts.
//!
//! Every component writes additively into the residual stream, so its
//! direct effect on the final logits is its output projected through the
//! final RMSNorm and the unembedding. With the norm denominator frozen at
//! the value computed from the actual final residual the projection is
//! exactly linear, and component contributions sum to the logit
//! difference.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::Dataset;
use crate::model::{logit_diff, ActivationCache, HookPoint, Model, TokenId};

/// A model component whose output is added to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Embedding,
    Attn { layer: usize },
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

/// Treatment of the final RMSNorm when projecting onto the unembedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormHandling {
    /// Scale by `gamma_eff / rms(final residual)` of the run.
    #[default]
    Frozen,
    /// Project raw component outputs, ignoring the final norm.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

impl std::str::FromStr for Sign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "pos" | "+" => Ok(Sign::Positive),
            "negative" | "neg" | "-" => Ok(Sign::Negative),
            other => Err(Error::InvalidArgument(format!("unknown sign `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub token: TokenId,
    pub score: f64,
}

fn check_token(model: &Model, t: TokenId) -> Result<()> {
    if t as usize >= model.config.vocab_size {
        return Err(Error::TokenOutOfRange { token: t, vocab_size: model.config.vocab_size });
    }
    Ok(())
}

/// Vector `w` with `DLDA(f) = f . w` at the cache's last position.
pub fn logit_diff_readout(model: &Model, cache: &ActivationCache, g: TokenId, b: TokenId, norm: NormHandling) -> Result<Vec<f64>> {
    check_token(model, g)?;
    check_token(model, b)?;
    let u = &model.weights.unembed;
    let (g, b) = (g as usize, b as usize);
    let mut w: Vec<f64> = (0..model.config.d_model).map(|i| u[[i, g]] - u[[i, b]]).collect();
    if norm == NormHandling::Frozen {
        let gamma = model.final_gamma();
        let denom = cache.final_rms(cache.last_pos());
        for (wi, gi) in w.iter_mut().zip(gamma) {
            *wi *= gi / denom;
        }
    }
    Ok(w)
}

fn component_output(cache: &ActivationCache, component: Component) -> Result<ArrayView1<'_, f64>> {
    let pos = cache.last_pos();
    let hook = match component {
        Component::Embedding => HookPoint::ResidPre { layer: 0, pos },
        Component::Attn { layer } => HookPoint::AttnOut { layer, pos },
        Component::Head { layer, head } => HookPoint::HeadOut { layer, head, pos },
        Component::Mlp { layer } => HookPoint::MlpOut { layer, pos },
    };
    cache.stream(&hook)
}

/// DLDA of one component at the last position of a clean-run cache.
pub fn dlda_component(
    model: &Model,
    cache: &ActivationCache,
    g: TokenId,
    b: TokenId,
    component: Component,
    norm: NormHandling,
) -> Result<f64> {
    let w = logit_diff_readout(model, cache, g, b, norm)?;
    let f = component_output(cache, component)?;
    Ok(f.iter().zip(&w).map(|(a, b)| a * b).sum())
}

/// Per-neuron DLDA of the MLP at `layer`: activation times the projected
/// `W_out` row. Sums to the MLP's [`dlda_component`].
pub fn neuron_dlda(model: &Model, cache: &ActivationCache, layer: usize, g: TokenId, b: TokenId, norm: NormHandling) -> Result<Vec<f64>> {
    if layer >= model.config.n_layers {
        return Err(Error::OutOfRange(format!("layer {layer} of {}", model.config.n_layers)));
    }
    let w = ndarray::Array1::from(logit_diff_readout(model, cache, g, b, norm)?);
    let per_neuron = model.weights.layers[layer].w_out.dot(&w);
    let acts = cache.neurons(layer, cache.last_pos());
    Ok(acts.iter().zip(per_neuron.iter()).map(|(a, p)| a * p).collect())
}

fn rank(scores: Vec<f64>, k: usize) -> Vec<ScoredToken> {
    let mut ranked: Vec<ScoredToken> =
        scores.into_iter().enumerate().map(|(t, score)| ScoredToken { token: t as TokenId, score }).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.token.cmp(&b.token)));
    ranked.truncate(k);
    ranked
}

/// Tokens most promoted by a neuron firing with `sign`.
///
/// Scores are `sign * (W_out[neuron] * gamma) . W_U[:, t]`; the per-input
/// norm denominator is omitted, which leaves the ranking unchanged.
/// `apply_gamma = false` drops the final norm scale as well.
pub fn promoted_tokens(model: &Model, layer: usize, neuron: usize, sign: Sign, k: usize, apply_gamma: bool) -> Result<Vec<ScoredToken>> {
    let cfg = &model.config;
    if layer >= cfg.n_layers || neuron >= cfg.d_mlp {
        return Err(Error::OutOfRange(format!("neuron L{layer}N{neuron}")));
    }
    if k > cfg.vocab_size {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds vocabulary size {}", cfg.vocab_size)));
    }
    let row = model.weights.layers[layer].w_out.row(neuron);
    let mut dir = row.to_owned();
    if apply_gamma {
        dir *= &ndarray::Array1::from(model.final_gamma());
    }
    dir *= sign.factor();
    let scores = dir.dot(&model.weights.unembed).to_vec();
    Ok(rank(scores, k))
}

/// Top-`k` tokens by logit; ties go to the lower token id.
pub fn top_k_tokens(logits: ArrayView1<'_, f64>, k: usize) -> Result<Vec<ScoredToken>> {
    if k > logits.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds vocabulary size {}", logits.len())));
    }
    Ok(rank(logits.to_vec(), k))
}

/// Attention weights scaled by the norm of each source position's output,
/// `a_ij * |v_j W_O|`, with rows renormalized to sum to one.
pub fn ov_weighted_pattern(model: &Model, cache: &ActivationCache, layer: usize, head: usize) -> Result<Array2<f64>> {
    let cfg = &model.config;
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(Error::OutOfRange(format!("head L{layer}H{head}")));
    }
    let pattern = cache.attention_pattern(layer, head);
    let values = cache.head_values(layer, head);
    let w_o = model.weights.layers[layer].w_o.slice(ndarray::s![head, .., ..]);
    let norms: Vec<f64> = (0..cache.seq_len()).map(|j| values.row(j).dot(&w_o).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut out = Array2::zeros(pattern.raw_dim());
    for i in 0..cache.seq_len() {
        let mut total = 0.0;
        for j in 0..cache.seq_len() {
            out[[i, j]] = pattern[[i, j]] * norms[j];
            total += out[[i, j]];
        }
        if total > 0.0 {
            out.row_mut(i).mapv_inplace(|x| x / total);
        }
    }
    Ok(out)
}

/// [`ov_weighted_pattern`] averaged by position index over clean runs.
pub fn mean_ov_weighted_pattern(model: &Model, dataset: &Dataset, layer: usize, head: usize) -> Result<Array2<f64>> {
    let seq = dataset.seq_len();
    let mats = dataset
        .pairs
        .par_iter()
        .map(|p| {
            let out = model.forward(&p.clean, &[])?;
            ov_weighted_pattern(model, &out.cache, layer, head)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Array2::zeros((seq, seq));
    for m in &mats {
        acc += m;
    }
    Ok(acc / mats.len() as f64)
}

/// Dataset-mean DLDA of every component and, optionally, every neuron of one MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionReport {
    pub model_id: String,
    pub frozen_norm: bool,
    pub mean_logit_diff: f64,
    pub embedding: f64,
    /// Per layer.
    pub attn: Vec<f64>,
    /// Per layer.
    pub mlp: Vec<f64>,
    /// `[layer][head]`
    pub heads: Vec<Vec<f64>>,
    pub neuron_layer: Option<usize>,
    pub neurons: Vec<f64>,
}

impl AttributionReport {
    /// Embedding plus every attention block and MLP.
    pub fn component_sum(&self) -> f64 {
        self.embedding + self.attn.iter().sum::<f64>() + self.mlp.iter().sum::<f64>()
    }
}

/// Neuron DLDA of one MLP, averaged over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronReport {
    pub model_id: String,
    pub layer: usize,
    pub values: Vec<f64>,
}

impl NeuronReport {
    /// Neuron ids ordered by decreasing `|value|`, ties by ascending id.
    pub fn ranked_by_magnitude(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.values.len()).collect();
        ids.sort_by(|&a, &b| self.values[b].abs().total_cmp(&self.values[a].abs()).then(a.cmp(&b)));
        ids
    }
}

struct PairAttribution {
    ld: f64,
    embedding: f64,
    attn: Vec<f64>,
    mlp: Vec<f64>,
    heads: Vec<Vec<f64>>,
    neurons: Vec<f64>,
}

/// Clean-run attribution averaged over `dataset`.
pub fn attribution_report(model: &Model, dataset: &Dataset, neuron_layer: Option<usize>, norm: NormHandling) -> Result<AttributionReport> {
    if dataset.pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = &model.config;
    if let Some(l) = neuron_layer {
        if l >= cfg.n_layers {
            return Err(Error::OutOfRange(format!("layer {l} of {}", cfg.n_layers)));
        }
    }
    let per_pair = dataset
        .pairs
        .par_iter()
        .map(|p| -> Result<PairAttribution> {
            let out = model.forward(&p.clean, &[])?;
            let c = &out.cache;
            let d = |comp| dlda_component(model, c, p.g, p.b, comp, norm);
            Ok(PairAttribution {
                ld: logit_diff(out.last_logits(), p.g, p.b)?,
                embedding: d(Component::Embedding)?,
                attn: (0..cfg.n_layers).map(|layer| d(Component::Attn { layer })).collect::<Result<_>>()?,
                mlp: (0..cfg.n_layers).map(|layer| d(Component::Mlp { layer })).collect::<Result<_>>()?,
                heads: (0..cfg.n_layers)
                    .map(|layer| (0..cfg.n_heads).map(|head| d(Component::Head { layer, head })).collect())
                    .collect::<Result<_>>()?,
                neurons: match neuron_layer {
                    Some(l) => neuron_dlda(model, c, l, p.g, p.b, norm)?,
                    None => Vec::new(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_pair.len() as f64;
    let mean = |f: &dyn Fn(&PairAttribution) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
    let mean_vec = |f: &dyn Fn(&PairAttribution) -> &Vec<f64>, len: usize| -> Vec<f64> {
        (0..len).map(|i| per_pair.iter().map(|p| f(p)[i]).sum::<f64>() / n).collect()
    };
    Ok(AttributionReport {
        model_id: model.fingerprint(),
        frozen_norm: norm == NormHandling::Frozen,
        mean_logit_diff: mean(&|p| p.ld),
        embedding: mean(&|p| p.embedding),
        attn: mean_vec(&|p| &p.attn, cfg.n_layers),
        mlp: mean_vec(&|p| &p.mlp, cfg.n_layers),
        heads: (0..cfg.n_layers)
            .map(|l| (0..cfg.n_heads).map(|h| per_pair.iter().map(|p| p.heads[l][h]).sum::<f64>() / n).collect())
            .collect(),
        neuron_layer,
        neurons: mean_vec(&|p| &p.neurons, if neuron_layer.is_some() { cfg.d_mlp } else { 0 }),
    })
}

/// Dataset-mean neuron DLDA of one MLP.
pub fn neuron_report(model: &Model, dataset: &Dataset, layer: usize, norm: NormHandling) -> Result<NeuronReport> {
    if dataset.pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = dataset
        .pairs
        .par_iter()
        .map(|p| {
            let out = model.forward(&p.clean, &[])?;
            neuron_dlda(model, &out.cache, layer, p.g, p.b, norm)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let values = (0..model.config.d_mlp).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    Ok(NeuronReport { model_id: model.fingerprint(), layer, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelWeights, TokenSequence};
    use ndarray::Array1;

    fn model(seed: u64) -> Model {
        let c = ModelConfig::toy(3, 2, 12, 4, 20, 15);
        Model::new(c.clone(), ModelWeights::random(&c, seed)).unwrap()
    }

    #[test]
    fn components_sum_to_logit_diff() {
        let m = model(1);
        let out = m.forward(&TokenSequence::new(vec![2, 7, 1, 9]), &[]).unwrap();
        let (g, b) = (4, 11);
        let mut total = dlda_component(&m, &out.cache, g, b, Component::Embedding, NormHandling::Frozen).unwrap();
        for layer in 0..3 {
            total += dlda_component(&m, &out.cache, g, b, Component::Attn { layer }, NormHandling::Frozen).unwrap();
            total += dlda_component(&m, &out.cache, g, b, Component::Mlp { layer }, NormHandling::Frozen).unwrap();
        }
        let ld = logit_diff(out.last_logits(), g, b).unwrap();
        assert!((total - ld).abs() <= 1e-8 * ld.abs().max(1e-12), "{total} vs {ld}");
    }

    #[test]
    fn heads_sum_to_block_and_neurons_sum_to_mlp() {
        let m = model(2);
        let out = m.forward(&TokenSequence::new(vec![0, 3, 5]), &[]).unwrap();
        for layer in 0..3 {
            let block = dlda_component(&m, &out.cache, 1, 2, Component::Attn { layer }, NormHandling::Frozen).unwrap();
            let heads: f64 = (0..2)
                .map(|head| dlda_component(&m, &out.cache, 1, 2, Component::Head { layer, head }, NormHandling::Frozen).unwrap())
                .sum();
            assert!((block - heads).abs() <= 1e-10 * block.abs().max(1.0));
            let mlp = dlda_component(&m, &out.cache, 1, 2, Component::Mlp { layer }, NormHandling::Frozen).unwrap();
            let neurons: f64 = neuron_dlda(&m, &out.cache, layer, 1, 2, NormHandling::Frozen).unwrap().iter().sum();
            assert!((mlp - neurons).abs() <= 1e-8 * mlp.abs().max(1e-12));
        }
        assert!(neuron_dlda(&m, &out.cache, 3, 1, 2, NormHandling::Frozen).is_err());
    }

    #[test]
    fn negated_activation_negates_contribution() {
        let m = model(5);
        let out = m.forward(&TokenSequence::new(vec![4, 1, 8]), &[]).unwrap();
        let before = neuron_dlda(&m, &out.cache, 1, 3, 6, NormHandling::Frozen).unwrap();
        let mut cache = out.cache.clone();
        let last = cache.seq_len - 1;
        cache.neuron_act[[1, last, 7]] *= -1.0;
        let after = neuron_dlda(&m, &cache, 1, 3, 6, NormHandling::Frozen).unwrap();
        for (i, (a, b)) in before.iter().zip(&after).enumerate() {
            if i == 7 {
                assert_eq!(*b, -*a);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn raw_mode_ignores_final_norm() {
        let m = model(3);
        let out = m.forward(&TokenSequence::new(vec![0, 3, 5]), &[]).unwrap();
        let raw = logit_diff_readout(&m, &out.cache, 1, 2, NormHandling::Raw).unwrap();
        let u = &m.weights.unembed;
        for i in 0..12 {
            assert_eq!(raw[i], u[[i, 1]] - u[[i, 2]]);
        }
    }

    #[test]
    fn top_k_basics() {
        let mut l = Array1::zeros(6);
        l[4] = 1.0;
        let top = top_k_tokens(l.view(), 2).unwrap();
        assert_eq!(top[0].token, 4);
        // tie on zeros broken by ascending id
        assert_eq!(top[1].token, 0);
        let all = top_k_tokens(l.view(), 6).unwrap();
        let mut ids: Vec<_> = all.iter().map(|t| t.token).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
        assert!(top_k_tokens(l.view(), 7).is_err());
    }

    #[test]
    fn promoted_sign_flip_reverses_order() {
        let m = model(4);
        let pos = promoted_tokens(&m, 1, 3, Sign::Positive, 15, true).unwrap();
        let neg = promoted_tokens(&m, 1, 3, Sign::Negative, 15, true).unwrap();
        let rev: Vec<_> = neg.iter().rev().map(|t| t.token).collect();
        assert_eq!(pos.iter().map(|t| t.token).collect::<Vec<_>>(), rev);
        for (p, n) in pos.iter().zip(neg.iter().rev()) {
            assert_eq!(p.score, -n.score);
        }
    }

    #[test]
    fn promoted_ranking_invariant_to_row_scale() {
        let mut m = model(5);
        let before: Vec<_> = promoted_tokens(&m, 2, 0, Sign::Positive, 15, true).unwrap().iter().map(|t| t.token).collect();
        m.weights.layers[2].w_out.row_mut(0).mapv_inplace(|x| x * 3.7);
        let after: Vec<_> = promoted_tokens(&m, 2, 0, Sign::Positive, 15, true).unwrap().iter().map(|t| t.token).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn ov_pattern_rows_are_distributions() {
        let m = model(6);
        let out = m.forward(&TokenSequence::new(vec![0, 3, 5, 8, 1]), &[]).unwrap();
        let h = ov_weighted_pattern(&m, &out.cache, 1, 1).unwrap();
        for i in 0..5 {
            let row = h.row(i);
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
            for j in i + 1..5 {
                assert_eq!(row[j], 0.0);
            }
        }
        // first row attends only to itself
        assert_eq!(h[[0, 0]], 1.0);
        assert!(ov_weighted_pattern(&m, &out.cache, 1, 2).is_err());
    }

    #[test]
    fn zero_value_outputs_give_zero_rows() {
        let mut m = model(7);
        m.weights.layers[0].w_o.fill(0.0);
        let out = m.forward(&TokenSequence::new(vec![0, 3]), &[]).unwrap();
        let h = ov_weighted_pattern(&m, &out.cache, 0, 0).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
    }
}
