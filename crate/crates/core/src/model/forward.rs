// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView1};

use super::norm::{normalize_with, rms_denominator};
use super::{ActivationCache, ForwardOutput, HookPoint, Intervention, Model, TokenId, TokenSequence};
use crate::error::{Error, Result};

/// GELU, tanh approximation.
pub fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// `logits[g] - logits[b]`.
pub fn logit_diff(logits: ArrayView1<'_, f64>, g: TokenId, b: TokenId) -> Result<f64> {
    let n = logits.len();
    for t in [g, b] {
        if t as usize >= n {
            return Err(Error::TokenOutOfRange { token: t, vocab_size: n });
        }
    }
    Ok(logits[g as usize] - logits[b as usize])
}

type HookTable<'a> = HashMap<HookPoint, Vec<&'a Intervention>>;

fn apply(table: &HookTable<'_>, hook: HookPoint, target: &mut [f64]) {
    if let Some(list) = table.get(&hook) {
        for iv in list {
            iv.mode.apply(target);
        }
    }
}

fn apply_row(table: &HookTable<'_>, hook: HookPoint, mut row: ndarray::ArrayViewMut1<'_, f64>) {
    if table.contains_key(&hook) {
        apply(table, hook, row.as_slice_mut().expect("contiguous row"));
    }
}

fn rotate(x: &mut [f64], pos: usize, base: f64) {
    let half = x.len() / 2;
    for i in 0..half {
        let freq = base.powf(-2.0 * i as f64 / x.len() as f64);
        let (sin, cos) = (pos as f64 * freq).sin_cos();
        let (a, b) = (x[i], x[i + half]);
        x[i] = a * cos - b * sin;
        x[i + half] = b * cos + a * sin;
    }
}

impl Model {
    /// Runs the decoder on `tokens`, recording every hook point and applying
    /// `interventions` at the moment each target is produced.
    ///
    /// Several interventions on the same hook are applied in list order.
    pub fn forward(&self, tokens: &TokenSequence, interventions: &[Intervention]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        tokens.validate(cfg)?;
        let seq = tokens.len();
        let mut table: HookTable<'_> = HashMap::new();
        for iv in interventions {
            iv.validate(cfg, seq)?;
            table.entry(iv.target).or_default().push(iv);
        }

        let (d, n_heads, d_head) = (cfg.d_model, cfg.n_heads, cfg.d_head);
        let mut cache = ActivationCache::new(cfg, seq);
        let mult = cfg.embed_multiplier();

        let mut resid = Array2::<f64>::zeros((seq, d));
        for (p, &t) in tokens.ids().iter().enumerate() {
            let row = self.weights.embed.row(t as usize);
            resid.row_mut(p).zip_mut_with(&row, |r, e| *r = e * mult);
        }

        let normalize = |x: &Array2<f64>, scale: &ndarray::Array1<f64>| -> Array2<f64> {
            let mut out = Array2::zeros(x.raw_dim());
            let scale = scale.as_slice().expect("contiguous");
            for p in 0..x.nrows() {
                let row = x.row(p);
                let row = row.as_slice().expect("contiguous");
                let denom = rms_denominator(row, cfg.norm_eps);
                let n = normalize_with(row, scale, denom, cfg.norm_offset);
                out.row_mut(p).assign(&ndarray::ArrayView1::from(&n));
            }
            out
        };
        let inv_sqrt_dh = 1.0 / (d_head as f64).sqrt();

        for (layer, lw) in self.weights.layers.iter().enumerate() {
            for pos in 0..seq {
                apply_row(&table, HookPoint::ResidPre { layer, pos }, resid.row_mut(pos));
            }
            cache.resid_pre.slice_mut(s![layer, .., ..]).assign(&resid);

            let normed = normalize(&resid, &lw.attn_norm);
            let mut attn_out = Array2::<f64>::zeros((seq, d));
            for head in 0..n_heads {
                let mut q = normed.dot(&lw.w_q.slice(s![head, .., ..]));
                let mut k = normed.dot(&lw.w_k.slice(s![head, .., ..]));
                let v = normed.dot(&lw.w_v.slice(s![head, .., ..]));
                if let Some(base) = cfg.rope_base {
                    for p in 0..seq {
                        rotate(q.row_mut(p).as_slice_mut().unwrap(), p, base);
                        rotate(k.row_mut(p).as_slice_mut().unwrap(), p, base);
                    }
                }
                let mut pattern = Array2::<f64>::zeros((seq, seq));
                let mut z = Array2::<f64>::zeros((seq, d_head));
                for i in 0..seq {
                    let scores: Vec<f64> = (0..=i).map(|j| q.row(i).dot(&k.row(j)) * inv_sqrt_dh).collect();
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|sc| (sc - max).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        let a = e / total;
                        pattern[[i, j]] = a;
                        z.row_mut(i).scaled_add(a, &v.row(j));
                    }
                }
                let mut out = z.dot(&lw.w_o.slice(s![head, .., ..]));
                for pos in 0..seq {
                    apply_row(&table, HookPoint::HeadOut { layer, head, pos }, out.row_mut(pos));
                }
                attn_out += &out;
                cache.head_out.slice_mut(s![layer, head, .., ..]).assign(&out);
                cache.attn_pattern.slice_mut(s![layer, head, .., ..]).assign(&pattern);
                cache.values.slice_mut(s![layer, head, .., ..]).assign(&v);
            }
            for pos in 0..seq {
                apply_row(&table, HookPoint::AttnOut { layer, pos }, attn_out.row_mut(pos));
            }
            cache.attn_out.slice_mut(s![layer, .., ..]).assign(&attn_out);
            resid += &attn_out;

            let mnormed = normalize(&resid, &lw.mlp_norm);
            let gate = mnormed.dot(&lw.w_gate);
            let inner = mnormed.dot(&lw.w_in);
            let mut acts = Array2::<f64>::zeros(gate.raw_dim());
            ndarray::Zip::from(&mut acts).and(&gate).and(&inner).for_each(|a, &g, &x| *a = cfg.activation.apply(g) * x);
            if table.keys().any(|h| matches!(h, HookPoint::NeuronAct { layer: l, .. } if *l == layer)) {
                for pos in 0..seq {
                    for neuron in 0..cfg.d_mlp {
                        let hook = HookPoint::NeuronAct { layer, neuron, pos };
                        apply(&table, hook, std::slice::from_mut(&mut acts[[pos, neuron]]));
                    }
                }
            }
            cache.neuron_act.slice_mut(s![layer, .., ..]).assign(&acts);
            let mut mlp_out = acts.dot(&lw.w_out);
            for pos in 0..seq {
                apply_row(&table, HookPoint::MlpOut { layer, pos }, mlp_out.row_mut(pos));
            }
            cache.mlp_out.slice_mut(s![layer, .., ..]).assign(&mlp_out);
            resid += &mlp_out;
            for pos in 0..seq {
                apply_row(&table, HookPoint::ResidPost { layer, pos }, resid.row_mut(pos));
            }
            cache.resid_post.slice_mut(s![layer, .., ..]).assign(&resid);
        }

        let gamma = self.weights.final_norm.as_slice().expect("contiguous");
        let mut fnormed = Array2::<f64>::zeros((seq, d));
        for p in 0..seq {
            let row = resid.row(p);
            let row = row.as_slice().expect("contiguous");
            let denom = rms_denominator(row, cfg.norm_eps);
            cache.final_rms[p] = denom;
            fnormed.row_mut(p).assign(&ndarray::ArrayView1::from(&normalize_with(row, gamma, denom, cfg.norm_offset)));
        }
        cache.final_resid.assign(&resid);
        let logits = fnormed.dot(&self.weights.unembed);
        Ok(ForwardOutput { logits, cache })
    }
}
