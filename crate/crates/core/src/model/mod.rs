// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gemma-style decoder with complete activation capture and interventions.

mod cache;
mod config;
mod forward;
mod hooks;
mod norm;
mod weights;

pub use cache::{ActivationCache, ForwardOutput};
pub use config::{Activation, EmbedScale, ModelConfig, NormOffset};
pub use forward::{gelu_tanh, logit_diff};
pub use hooks::{HookPoint, Intervention, InterventionMode};
pub use norm::{rms_denominator, rms_norm};
pub use weights::{LayerWeights, ModelWeights, NamedTensors};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the vocabulary.
pub type TokenId = u32;

/// A validated-on-use list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.0.is_empty() || self.0.len() > config.max_seq {
            return Err(Error::SequenceLength { len: self.0.len(), max_seq: config.max_seq });
        }
        if let Some(&bad) = self.0.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::TokenOutOfRange { token: bad, vocab_size: config.vocab_size });
        }
        Ok(())
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// Configuration and weights bundled together; the unit every analysis runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    /// Validates shapes and finiteness before accepting the pair.
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    /// Stable content hash of config and weights (hex, 16 chars).
    pub fn fingerprint(&self) -> String {
        self.weights.fingerprint(&self.config)
    }

    /// Effective per-dimension scale applied by the final RMSNorm.
    pub fn final_gamma(&self) -> Vec<f64> {
        self.config.norm_offset.effective(self.weights.final_norm.as_slice().expect("contiguous"))
    }
}
