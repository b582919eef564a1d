// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2};

use super::{HookPoint, ModelConfig};
use crate::error::{Error, Result};

/// Recorded activations of one forward pass.
///
/// Storage is dense per hook family, so every hook point of the executed
/// model is present exactly once. Fields are private: a cache cannot be
/// mutated after the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub(crate) seq_len: usize,
    /// `[layer, pos, d_model]`
    pub(crate) resid_pre: Array3<f64>,
    pub(crate) resid_post: Array3<f64>,
    pub(crate) attn_out: Array3<f64>,
    pub(crate) mlp_out: Array3<f64>,
    /// `[layer, head, pos, d_model]`
    pub(crate) head_out: Array4<f64>,
    /// `[layer, pos, neuron]`
    pub(crate) neuron_act: Array3<f64>,
    /// `[layer, head, query_pos, key_pos]`
    pub(crate) attn_pattern: Array4<f64>,
    /// `[layer, head, pos, d_head]`
    pub(crate) values: Array4<f64>,
    /// `[pos, d_model]`
    pub(crate) final_resid: Array2<f64>,
    /// `[pos]`
    pub(crate) final_rms: Array1<f64>,
}

impl ActivationCache {
    pub(crate) fn new(config: &ModelConfig, seq_len: usize) -> Self {
        let (l, h, s, d) = (config.n_layers, config.n_heads, seq_len, config.d_model);
        Self {
            seq_len,
            resid_pre: Array3::zeros((l, s, d)),
            resid_post: Array3::zeros((l, s, d)),
            attn_out: Array3::zeros((l, s, d)),
            mlp_out: Array3::zeros((l, s, d)),
            head_out: Array4::zeros((l, h, s, d)),
            neuron_act: Array3::zeros((l, s, config.d_mlp)),
            attn_pattern: Array4::zeros((l, h, s, s)),
            values: Array4::zeros((l, h, s, config.d_head)),
            final_resid: Array2::zeros((s, d)),
            final_rms: Array1::zeros(s),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn last_pos(&self) -> usize {
        self.seq_len - 1
    }

    fn check(&self, hook: &HookPoint) -> Result<()> {
        let (n_layers, n_heads, _, _) = self.head_out.dim();
        let d_mlp = self.neuron_act.dim().2;
        let bad = |reason: String| Err(Error::InvalidHook { hook: *hook, reason });
        if hook.layer() >= n_layers {
            return bad(format!("cache holds {n_layers} layers"));
        }
        if hook.pos() >= self.seq_len {
            return bad(format!("cache holds {} positions", self.seq_len));
        }
        match *hook {
            HookPoint::HeadOut { head, .. } if head >= n_heads => bad(format!("cache holds {n_heads} heads")),
            HookPoint::NeuronAct { neuron, .. } if neuron >= d_mlp => bad(format!("cache holds {d_mlp} neurons")),
            _ => Ok(()),
        }
    }

    /// Recorded value at `hook`: a `d_model` vector, or a single element for neurons.
    pub fn value(&self, hook: &HookPoint) -> Result<Vec<f64>> {
        self.check(hook)?;
        Ok(match *hook {
            HookPoint::NeuronAct { layer, neuron, pos } => vec![self.neuron_act[[layer, pos, neuron]]],
            _ => self.stream_unchecked(hook).to_vec(),
        })
    }

    /// Borrowed view of a stream-valued hook point.
    pub fn stream(&self, hook: &HookPoint) -> Result<ArrayView1<'_, f64>> {
        self.check(hook)?;
        if matches!(hook, HookPoint::NeuronAct { .. }) {
            return Err(Error::InvalidHook { hook: *hook, reason: "neuron activations are scalar".into() });
        }
        Ok(self.stream_unchecked(hook))
    }

    fn stream_unchecked(&self, hook: &HookPoint) -> ArrayView1<'_, f64> {
        use ndarray::s;
        match *hook {
            HookPoint::ResidPre { layer, pos } => self.resid_pre.slice(s![layer, pos, ..]),
            HookPoint::ResidPost { layer, pos } => self.resid_post.slice(s![layer, pos, ..]),
            HookPoint::AttnOut { layer, pos } => self.attn_out.slice(s![layer, pos, ..]),
            HookPoint::MlpOut { layer, pos } => self.mlp_out.slice(s![layer, pos, ..]),
            HookPoint::HeadOut { layer, head, pos } => self.head_out.slice(s![layer, head, pos, ..]),
            HookPoint::NeuronAct { .. } => unreachable!("scalar hook"),
        }
    }

    /// Neuron activations of `layer` at `pos`.
    pub fn neurons(&self, layer: usize, pos: usize) -> ArrayView1<'_, f64> {
        self.neuron_act.slice(ndarray::s![layer, pos, ..])
    }

    /// Attention probabilities `[query, key]` of one head.
    pub fn attention_pattern(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.attn_pattern.slice(ndarray::s![layer, head, .., ..])
    }

    /// Per-position value vectors `[pos, d_head]` of one head.
    pub fn head_values(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.values.slice(ndarray::s![layer, head, .., ..])
    }

    /// Residual stream entering the final norm.
    pub fn final_resid(&self, pos: usize) -> ArrayView1<'_, f64> {
        self.final_resid.row(pos)
    }

    /// `sqrt(mean(x^2) + eps)` of the final residual.
    pub fn final_rms(&self, pos: usize) -> f64 {
        self.final_rms[pos]
    }

    pub fn n_layers(&self) -> usize {
        self.resid_pre.dim().0
    }
}

/// Logits for every position plus the activation cache.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[seq, vocab_size]`
    pub logits: Array2<f64>,
    pub cache: ActivationCache,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> ArrayView1<'_, f64> {
        self.logits.row(self.logits.nrows() - 1)
    }
}
