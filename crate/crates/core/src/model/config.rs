// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise activation applied to the gate projection of the gated MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluTanhApprox,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanhApprox => super::gelu_tanh(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedScale {
    SqrtDModel,
    None,
}

/// How an RMSNorm scale vector becomes the multiplier applied after normalizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOffset {
    /// multiplier = scale
    PlainGamma,
    /// multiplier = 1 + scale (Gemma checkpoints)
    OnePlusGamma,
}

impl NormOffset {
    pub fn effective(self, scale: &[f64]) -> Vec<f64> {
        match self {
            NormOffset::PlainGamma => scale.to_vec(),
            NormOffset::OnePlusGamma => scale.iter().map(|s| 1.0 + s).collect(),
        }
    }

    /// Inverse of [`NormOffset::effective`] for a single entry.
    pub fn raw_for(self, effective: f64) -> f64 {
        match self {
            NormOffset::PlainGamma => effective,
            NormOffset::OnePlusGamma => effective - 1.0,
        }
    }
}

/// Architecture hyperparameters.
///
/// `d_model` and `n_heads * d_head` are independent: all projections are
/// explicit matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// `None` disables rotary position embeddings.
    pub rope_base: Option<f64>,
    pub norm_eps: f64,
    pub activation: Activation,
    pub embed_scale: EmbedScale,
    pub norm_offset: NormOffset,
    #[serde(default)]
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// A tiny toy configuration: no rotary, plain gamma, no embedding scale.
    pub fn toy(n_layers: usize, n_heads: usize, d_model: usize, d_head: usize, d_mlp: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head,
            d_mlp,
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

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be at least 2".into()));
        }
        if self.max_seq < 2 {
            return Err(Error::InvalidConfig("max_seq must be at least 2".into()));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("norm_eps must be a positive real".into()));
        }
        if let Some(base) = self.rope_base {
            if !(base.is_finite() && base > 0.0) {
                return Err(Error::InvalidConfig("rope_base must be positive".into()));
            }
            if self.d_head % 2 != 0 {
                return Err(Error::InvalidConfig("rotary embeddings need an even d_head".into()));
            }
        }
        Ok(())
    }

    pub fn embed_multiplier(&self) -> f64 {
        match self.embed_scale {
            EmbedScale::SqrtDModel => (self.d_model as f64).sqrt(),
            EmbedScale::None => 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_counts_and_tiny_vocab() {
        let mut c = ModelConfig::toy(2, 2, 8, 4, 16, 10);
        assert!(c.validate().is_ok());
        c.n_heads = 0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = ModelConfig::toy(2, 2, 8, 4, 16, 1);
        assert!(c.validate().is_err());
        c.vocab_size = 2;
        c.max_seq = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn odd_head_dim_rejected_only_with_rotary() {
        let mut c = ModelConfig::toy(1, 1, 8, 3, 4, 4);
        assert!(c.validate().is_ok());
        c.rope_base = Some(10_000.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_uses_snake_case_enums() {
        let c = ModelConfig::toy(1, 1, 4, 2, 4, 4);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"gelu_tanh_approx\""));
        assert!(s.contains("\"plain_gamma\""));
        assert!(s.contains("\"rope_base\":null"));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
