// SPDX-License-Identifier: MIT OR Apache-2.0

//! The hooked forward pass against a plain-loop reference implementation,
//! plus structural invariants of the cache.

// Indexed loops on purpose: the reference should not share idioms with the
// code under test.
#![allow(clippy::needless_range_loop)]

use circuit_lens_core::model::{Activation, EmbedScale, NormOffset};
use circuit_lens_core::{HookPoint, Intervention, Model, ModelConfig, ModelWeights, TokenSequence};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn rms(x: &[f64], scale: &[f64], eps: f64, one_plus: bool) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps).sqrt();
    x.iter().zip(scale).map(|(v, s)| v / r * if one_plus { 1.0 + s } else { *s }).collect()
}

fn rope(x: &mut [f64], pos: usize, base: f64) {
    let n = x.len();
    let orig = x.to_vec();
    for i in 0..n {
        let k = i % (n / 2);
        let theta = pos as f64 / base.powf(2.0 * k as f64 / n as f64);
        let rotated = if i < n / 2 { -orig[i + n / 2] } else { orig[i - n / 2] };
        x[i] = orig[i] * theta.cos() + rotated * theta.sin();
    }
}

/// Logits for every position, written from the architecture description alone.
fn reference(model: &Model, tokens: &[u32]) -> Mat {
    let c = &model.config;
    let w = &model.weights;
    let one_plus = c.norm_offset == NormOffset::OnePlusGamma;
    let mult = if c.embed_scale == EmbedScale::SqrtDModel { (c.d_model as f64).sqrt() } else { 1.0 };
    let s = tokens.len();
    let mut x: Mat = tokens.iter().map(|&t| (0..c.d_model).map(|i| w.embed[[t as usize, i]] * mult).collect()).collect();
    for lw in &w.layers {
        let scale: Vec<f64> = lw.attn_norm.to_vec();
        let n: Mat = x.iter().map(|r| rms(r, &scale, c.norm_eps, one_plus)).collect();
        let mut attn = vec![vec![0.0; c.d_model]; s];
        for h in 0..c.n_heads {
            let proj = |m: &ndarray::Array3<f64>, p: usize| -> Vec<f64> {
                (0..c.d_head).map(|j| (0..c.d_model).map(|i| n[p][i] * m[[h, i, j]]).sum()).collect()
            };
            let mut q: Mat = (0..s).map(|p| proj(&lw.w_q, p)).collect();
            let mut k: Mat = (0..s).map(|p| proj(&lw.w_k, p)).collect();
            let v: Mat = (0..s).map(|p| proj(&lw.w_v, p)).collect();
            if let Some(base) = c.rope_base {
                for p in 0..s {
                    rope(&mut q[p], p, base);
                    rope(&mut k[p], p, base);
                }
            }
            for i in 0..s {
                let sc: Vec<f64> =
                    (0..=i).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (c.d_head as f64).sqrt()).collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = sc.iter().map(|v| (v - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                let mut z = vec![0.0; c.d_head];
                for j in 0..=i {
                    for t in 0..c.d_head {
                        z[t] += e[j] / tot * v[j][t];
                    }
                }
                for o in 0..c.d_model {
                    attn[i][o] += (0..c.d_head).map(|t| z[t] * lw.w_o[[h, t, o]]).sum::<f64>();
                }
            }
        }
        for p in 0..s {
            for o in 0..c.d_model {
                x[p][o] += attn[p][o];
            }
        }
        let scale: Vec<f64> = lw.mlp_norm.to_vec();
        for p in 0..s {
            let nm = rms(&x[p], &scale, c.norm_eps, one_plus);
            let mut out = vec![0.0; c.d_model];
            for u in 0..c.d_mlp {
                let g: f64 = (0..c.d_model).map(|i| nm[i] * lw.w_gate[[i, u]]).sum();
                let a: f64 = (0..c.d_model).map(|i| nm[i] * lw.w_in[[i, u]]).sum();
                let act = match c.activation {
                    Activation::GeluTanhApprox => gelu(g),
                    Activation::Identity => g,
                } * a;
                for o in 0..c.d_model {
                    out[o] += act * lw.w_out[[u, o]];
                }
            }
            for o in 0..c.d_model {
                x[p][o] += out[o];
            }
        }
    }
    let scale: Vec<f64> = w.final_norm.to_vec();
    x.iter()
        .map(|r| {
            let n = rms(r, &scale, c.norm_eps, one_plus);
            (0..c.vocab_size).map(|t| (0..c.d_model).map(|i| n[i] * w.unembed[[i, t]]).sum()).collect()
        })
        .collect()
}

prop_compose! {
    fn arb_model()(
        n_layers in 1usize..=3,
        n_heads in 1usize..=3,
        d_model in prop::sample::select(vec![4usize, 6, 8]),
        d_head in prop::sample::select(vec![2usize, 4]),
        d_mlp in 2usize..=8,
        vocab in 3usize..=12,
        rope in any::<bool>(),
        gelu in any::<bool>(),
        sqrt_scale in any::<bool>(),
        one_plus in any::<bool>(),
        tied in any::<bool>(),
        seed in any::<u64>(),
    ) -> Model {
        let mut c = ModelConfig::toy(n_layers, n_heads, d_model, d_head, d_mlp, vocab);
        c.max_seq = 8;
        c.rope_base = rope.then_some(10_000.0);
        c.activation = if gelu { Activation::GeluTanhApprox } else { Activation::Identity };
        c.embed_scale = if sqrt_scale { EmbedScale::SqrtDModel } else { EmbedScale::None };
        c.norm_offset = if one_plus { NormOffset::OnePlusGamma } else { NormOffset::PlainGamma };
        c.tied_embeddings = tied;
        let w = ModelWeights::random(&c, seed);
        Model::new(c, w).unwrap()
    }
}

fn arb_input() -> impl Strategy<Value = (Model, TokenSequence)> {
    arb_model().prop_flat_map(|m| {
        let v = m.config.vocab_size as u32;
        (Just(m), prop::collection::vec(0..v, 1..=8)).prop_map(|(m, t)| (m, TokenSequence::new(t)))
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_reference((m, t) in arb_input()) {
        let out = m.forward(&t, &[]).unwrap();
        let want = reference(&m, t.ids());
        for (p, row) in want.iter().enumerate() {
            for (v, w) in row.iter().enumerate() {
                prop_assert!(close(out.logits[[p, v]], *w, 1e-10), "pos {p} tok {v}: {} vs {w}", out.logits[[p, v]]);
            }
        }
    }

    #[test]
    fn residual_stream_is_a_sum((m, t) in arb_input()) {
        let c = &m.config;
        let out = m.forward(&t, &[]).unwrap();
        let cache = &out.cache;
        for layer in 0..c.n_layers {
            for pos in 0..t.len() {
                let pre = cache.value(&HookPoint::ResidPre { layer, pos }).unwrap();
                let attn = cache.value(&HookPoint::AttnOut { layer, pos }).unwrap();
                let mlp = cache.value(&HookPoint::MlpOut { layer, pos }).unwrap();
                let post = cache.value(&HookPoint::ResidPost { layer, pos }).unwrap();
                let mut heads = vec![0.0; c.d_model];
                for head in 0..c.n_heads {
                    for (h, v) in heads.iter_mut().zip(cache.value(&HookPoint::HeadOut { layer, head, pos }).unwrap()) {
                        *h += v;
                    }
                }
                let acts = cache.neurons(layer, pos);
                let recon = acts.dot(&m.weights.layers[layer].w_out);
                for i in 0..c.d_model {
                    prop_assert!(close(post[i], pre[i] + attn[i] + mlp[i], 1e-12));
                    prop_assert!(close(attn[i], heads[i], 1e-12));
                    prop_assert!(close(mlp[i], recon[i], 1e-12));
                }
                if layer + 1 < c.n_layers {
                    prop_assert_eq!(post, cache.value(&HookPoint::ResidPre { layer: layer + 1, pos }).unwrap());
                }
            }
        }
    }

    #[test]
    fn attention_is_causal((m, t) in arb_input(), replacement in 0u32..3) {
        prop_assume!(t.len() >= 2);
        let out = m.forward(&t, &[]).unwrap();
        let mut changed = t.clone();
        let last = changed.len() - 1;
        changed.0[last] = (changed.0[last] + 1 + replacement) % m.config.vocab_size as u32;
        let out2 = m.forward(&changed, &[]).unwrap();
        for p in 0..last {
            for v in 0..m.config.vocab_size {
                prop_assert_eq!(out.logits[[p, v]], out2.logits[[p, v]]);
            }
        }
        for l in 0..m.config.n_layers {
            for h in 0..m.config.n_heads {
                let pat = out.cache.attention_pattern(l, h);
                for i in 0..t.len() {
                    prop_assert!((pat.row(i).sum() - 1.0).abs() < 1e-12);
                    for j in i + 1..t.len() {
                        prop_assert_eq!(pat[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic((m, t) in arb_input()) {
        let a = m.forward(&t, &[]).unwrap();
        let b = m.forward(&t, &[]).unwrap();
        prop_assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn interventions_apply_at_production((m, t) in arb_input(), delta in -2.0f64..2.0) {
        let c = &m.config;
        let pos = t.len() - 1;
        let layer = c.n_layers - 1;
        let hook = HookPoint::HeadOut { layer, head: 0, pos };
        let base = m.forward(&t, &[]).unwrap();
        let orig = base.cache.value(&hook).unwrap();
        let add = vec![delta; c.d_model];
        let out = m.forward(&t, &[Intervention::add(hook, add.clone())]).unwrap();
        let got = out.cache.value(&hook).unwrap();
        for i in 0..c.d_model {
            prop_assert!(close(got[i], orig[i] + delta, 1e-12));
        }
        // add then subtract restores the original run
        let neg: Vec<f64> = add.iter().map(|x| -x).collect();
        let back = m.forward(&t, &[Intervention::add(hook, add), Intervention::add(hook, neg)]).unwrap();
        for v in 0..c.vocab_size {
            prop_assert!(close(back.logits[[pos, v]], base.logits[[pos, v]], 1e-10));
        }
        // set replaces the value outright
        let set = m.forward(&t, &[Intervention::set(hook, vec![0.25; c.d_model])]).unwrap();
        prop_assert_eq!(set.cache.value(&hook).unwrap(), vec![0.25; c.d_model]);
    }
}
