// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Parameters of one decoder block.
/// Tensor name to `(shape, row-major data)`.
pub type NamedTensors = std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Array1<f64>,
    /// `[n_heads, d_model, d_head]`
    pub w_q: Array3<f64>,
    /// `[n_heads, d_model, d_head]`
    pub w_k: Array3<f64>,
    /// `[n_heads, d_model, d_head]`
    pub w_v: Array3<f64>,
    /// `[n_heads, d_head, d_model]`
    pub w_o: Array3<f64>,
    pub mlp_norm: Array1<f64>,
    /// `[d_model, d_mlp]`
    pub w_gate: Array2<f64>,
    /// `[d_model, d_mlp]`
    pub w_in: Array2<f64>,
    /// `[d_mlp, d_model]`
    pub w_out: Array2<f64>,
}

/// All parameter tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `[vocab_size, d_model]`
    pub embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Array1<f64>,
    /// `[d_model, vocab_size]`
    pub unembed: Array2<f64>,
}

/// Canonical tensor names, in blob order.
pub(crate) fn canonical_names(n_layers: usize) -> Vec<String> {
    let mut names = vec!["embed.W_E".to_string()];
    for i in 0..n_layers {
        names.push(format!("layer{i}.attn_norm"));
        for m in ["W_Q", "W_K", "W_V", "W_O"] {
            names.push(format!("layer{i}.attn.{m}"));
        }
        names.push(format!("layer{i}.mlp_norm"));
        for m in ["W_gate", "W_in", "W_out"] {
            names.push(format!("layer{i}.mlp.{m}"));
        }
    }
    names.push("final_norm".into());
    names.push("unembed.W_U".into());
    names
}

impl ModelWeights {
    /// All-zero tensors with norm scales set so that `gamma_eff = 1`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, h, dh, dm, v) = (config.d_model, config.n_heads, config.d_head, config.d_mlp, config.vocab_size);
        let unit = Array1::from_elem(d, config.norm_offset.raw_for(1.0));
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: unit.clone(),
                w_q: Array3::zeros((h, d, dh)),
                w_k: Array3::zeros((h, d, dh)),
                w_v: Array3::zeros((h, d, dh)),
                w_o: Array3::zeros((h, dh, d)),
                mlp_norm: unit.clone(),
                w_gate: Array2::zeros((d, dm)),
                w_in: Array2::zeros((d, dm)),
                w_out: Array2::zeros((dm, d)),
            })
            .collect();
        Self { embed: Array2::zeros((v, d)), layers, final_norm: unit, unembed: Array2::zeros((d, v)) }
    }

    /// Gaussian weights with fan-in scaling; norm scales jitter around 1.
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(config);
        let fill = |a: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
            for x in a.iter_mut() {
                *x = n.sample(rng);
            }
        };
        let d = config.d_model;
        fill(w.embed.as_slice_mut().unwrap(), 1, &mut rng);
        let jitter = Normal::new(0.0, 0.1).unwrap();
        let scale = |a: &mut Array1<f64>, rng: &mut ChaCha8Rng| {
            for x in a.iter_mut() {
                *x = config.norm_offset.raw_for(1.0 + jitter.sample(rng));
            }
        };
        for layer in &mut w.layers {
            scale(&mut layer.attn_norm, &mut rng);
            fill(layer.w_q.as_slice_mut().unwrap(), d, &mut rng);
            fill(layer.w_k.as_slice_mut().unwrap(), d, &mut rng);
            fill(layer.w_v.as_slice_mut().unwrap(), d, &mut rng);
            fill(layer.w_o.as_slice_mut().unwrap(), config.d_head * config.n_heads, &mut rng);
            scale(&mut layer.mlp_norm, &mut rng);
            fill(layer.w_gate.as_slice_mut().unwrap(), d, &mut rng);
            fill(layer.w_in.as_slice_mut().unwrap(), d, &mut rng);
            fill(layer.w_out.as_slice_mut().unwrap(), config.d_mlp, &mut rng);
        }
        scale(&mut w.final_norm, &mut rng);
        if config.tied_embeddings {
            w.unembed = w.embed.t().to_owned();
        } else {
            fill(w.unembed.as_slice_mut().unwrap(), d, &mut rng);
        }
        w
    }

    /// Tensors in canonical order as `(name, shape, row-major data)`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> (Vec<usize>, Vec<f64>) {
            (a.shape().to_vec(), a.iter().copied().collect())
        }
        let names = canonical_names(self.layers.len());
        let mut out = Vec::with_capacity(names.len());
        let mut names = names.into_iter();
        let mut push = |pair: (Vec<usize>, Vec<f64>)| {
            out.push((names.next().expect("name per tensor"), pair.0, pair.1));
        };
        push(flat(&self.embed));
        for l in &self.layers {
            push(flat(&l.attn_norm));
            push(flat(&l.w_q));
            push(flat(&l.w_k));
            push(flat(&l.w_v));
            push(flat(&l.w_o));
            push(flat(&l.mlp_norm));
            push(flat(&l.w_gate));
            push(flat(&l.w_in));
            push(flat(&l.w_out));
        }
        push(flat(&self.final_norm));
        push(flat(&self.unembed));
        out
    }

    /// Expected shape for each canonical tensor name under `config`.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, h, dh, dm, v) = (config.d_model, config.n_heads, config.d_head, config.d_mlp, config.vocab_size);
        canonical_names(config.n_layers)
            .into_iter()
            .map(|name| {
                let shape = if name == "embed.W_E" {
                    vec![v, d]
                } else if name == "unembed.W_U" {
                    vec![d, v]
                } else if name.ends_with("norm") {
                    vec![d]
                } else if name.ends_with("W_O") {
                    vec![h, dh, d]
                } else if name.contains(".attn.") {
                    vec![h, d, dh]
                } else if name.ends_with("W_out") {
                    vec![dm, d]
                } else {
                    vec![d, dm]
                };
                (name, shape)
            })
            .collect()
    }

    /// Rebuilds weights from canonical `(name, data)` pairs; shapes come from `config`.
    pub fn from_named(config: &ModelConfig, mut tensors: NamedTensors) -> Result<Self> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let (got, data) = tensors.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if got != shape {
                return Err(Error::ShapeMismatch { name: name.to_string(), expected: shape.to_vec(), got });
            }
            Ok(data)
        };
        let shapes = Self::expected_shapes(config);
        let mut it = shapes.iter();
        let mut next = || {
            let (n, s) = it.next().expect("canonical order");
            (n.clone(), s.clone())
        };
        let a2 = |s: &[usize], d: Vec<f64>| Array2::from_shape_vec((s[0], s[1]), d).expect("shape checked");
        let a3 = |s: &[usize], d: Vec<f64>| Array3::from_shape_vec((s[0], s[1], s[2]), d).expect("shape checked");

        let (n, s) = next();
        let embed = a2(&s, take(&n, &s)?);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let (n, s) = next();
            let attn_norm = Array1::from(take(&n, &s)?);
            let (n, s) = next();
            let w_q = a3(&s, take(&n, &s)?);
            let (n, s) = next();
            let w_k = a3(&s, take(&n, &s)?);
            let (n, s) = next();
            let w_v = a3(&s, take(&n, &s)?);
            let (n, s) = next();
            let w_o = a3(&s, take(&n, &s)?);
            let (n, s) = next();
            let mlp_norm = Array1::from(take(&n, &s)?);
            let (n, s) = next();
            let w_gate = a2(&s, take(&n, &s)?);
            let (n, s) = next();
            let w_in = a2(&s, take(&n, &s)?);
            let (n, s) = next();
            let w_out = a2(&s, take(&n, &s)?);
            layers.push(LayerWeights { attn_norm, w_q, w_k, w_v, w_o, mlp_norm, w_gate, w_in, w_out });
        }
        let (n, s) = next();
        let final_norm = Array1::from(take(&n, &s)?);
        let (n, s) = next();
        let unembed = a2(&s, take(&n, &s)?);
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::UnknownTensor(extra.clone()));
        }
        Ok(Self { embed, layers, final_norm, unembed })
    }

    /// Checks shapes against `config`, finiteness, and tied-embedding consistency.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::DimensionMismatch { context: "number of layers".into(), expected: config.n_layers, got: self.layers.len() });
        }
        for ((name, shape, data), (_, expected)) in self.named_tensors().iter().zip(Self::expected_shapes(config)) {
            if *shape != expected {
                return Err(Error::ShapeMismatch { name: name.clone(), expected, got: shape.clone() });
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        if config.tied_embeddings && self.unembed != self.embed.t() {
            return Err(Error::InvalidConfig("tied embeddings set but unembedding is not the transpose of the embedding".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self, config: &ModelConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config).expect("config serializes"));
        for (name, shape, data) in self.named_tensors() {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        let digest = h.finalize();
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_have_unit_effective_gamma() {
        let mut c = ModelConfig::toy(2, 2, 4, 2, 4, 5);
        let w = ModelWeights::zeros(&c);
        assert!(w.final_norm.iter().all(|&g| g == 1.0));
        c.norm_offset = super::super::NormOffset::OnePlusGamma;
        let w = ModelWeights::zeros(&c);
        assert!(w.final_norm.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn random_is_seed_deterministic_and_valid() {
        let c = ModelConfig::toy(3, 2, 8, 4, 12, 9);
        let a = ModelWeights::random(&c, 5);
        let b = ModelWeights::random(&c, 5);
        assert_eq!(a, b);
        assert_ne!(a, ModelWeights::random(&c, 6));
        a.validate(&c).unwrap();
        assert_eq!(a.fingerprint(&c), b.fingerprint(&c));
    }

    #[test]
    fn tied_embeddings_enforced() {
        let mut c = ModelConfig::toy(1, 1, 4, 2, 4, 6);
        c.tied_embeddings = true;
        let mut w = ModelWeights::random(&c, 1);
        w.validate(&c).unwrap();
        w.unembed[[0, 0]] += 1.0;
        assert!(w.validate(&c).is_err());
    }

    #[test]
    fn non_finite_rejected_with_tensor_name() {
        let c = ModelConfig::toy(2, 1, 4, 2, 4, 6);
        let mut w = ModelWeights::random(&c, 1);
        w.layers[1].w_in[[0, 0]] = f64::NAN;
        match w.validate(&c) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "layer1.mlp.W_in"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn named_round_trip() {
        let c = ModelConfig::toy(2, 3, 6, 2, 5, 7);
        let w = ModelWeights::random(&c, 9);
        let map = w.named_tensors().into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        assert_eq!(ModelWeights::from_named(&c, map).unwrap(), w);
    }
}
