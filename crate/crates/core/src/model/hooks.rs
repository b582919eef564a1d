// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// An addressable internal activation.
///
/// Stream-valued points hold a `d_model` vector; `NeuronAct` holds a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HookPoint {
    ResidPre { layer: usize, pos: usize },
    ResidPost { layer: usize, pos: usize },
    AttnOut { layer: usize, pos: usize },
    HeadOut { layer: usize, head: usize, pos: usize },
    MlpOut { layer: usize, pos: usize },
    NeuronAct { layer: usize, neuron: usize, pos: usize },
}

impl HookPoint {
    pub fn layer(&self) -> usize {
        match *self {
            HookPoint::ResidPre { layer, .. }
            | HookPoint::ResidPost { layer, .. }
            | HookPoint::AttnOut { layer, .. }
            | HookPoint::HeadOut { layer, .. }
            | HookPoint::MlpOut { layer, .. }
            | HookPoint::NeuronAct { layer, .. } => layer,
        }
    }

    pub fn pos(&self) -> usize {
        match *self {
            HookPoint::ResidPre { pos, .. }
            | HookPoint::ResidPost { pos, .. }
            | HookPoint::AttnOut { pos, .. }
            | HookPoint::HeadOut { pos, .. }
            | HookPoint::MlpOut { pos, .. }
            | HookPoint::NeuronAct { pos, .. } => pos,
        }
    }

    /// Length of the recorded value at this point.
    pub fn width(&self, config: &ModelConfig) -> usize {
        match self {
            HookPoint::NeuronAct { .. } => 1,
            _ => config.d_model,
        }
    }

    /// Every hook point of a model run on `seq_len` tokens, in execution order.
    pub fn all(config: &ModelConfig, seq_len: usize) -> Vec<HookPoint> {
        let mut out = Vec::new();
        for layer in 0..config.n_layers {
            for pos in 0..seq_len {
                out.push(HookPoint::ResidPre { layer, pos });
            }
            for head in 0..config.n_heads {
                for pos in 0..seq_len {
                    out.push(HookPoint::HeadOut { layer, head, pos });
                }
            }
            for pos in 0..seq_len {
                out.push(HookPoint::AttnOut { layer, pos });
            }
            for neuron in 0..config.d_mlp {
                for pos in 0..seq_len {
                    out.push(HookPoint::NeuronAct { layer, neuron, pos });
                }
            }
            for pos in 0..seq_len {
                out.push(HookPoint::MlpOut { layer, pos });
            }
            for pos in 0..seq_len {
                out.push(HookPoint::ResidPost { layer, pos });
            }
        }
        out
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidHook { hook: *self, reason });
        if self.layer() >= config.n_layers {
            return fail(format!("model has {} layers", config.n_layers));
        }
        if self.pos() >= seq_len {
            return fail(format!("sequence has {seq_len} positions"));
        }
        match *self {
            HookPoint::HeadOut { head, .. } if head >= config.n_heads => fail(format!("model has {} heads", config.n_heads)),
            HookPoint::NeuronAct { neuron, .. } if neuron >= config.d_mlp => fail(format!("MLP has {} neurons", config.d_mlp)),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            HookPoint::ResidPre { layer, pos } => write!(f, "resid_pre[L{layer}, p{pos}]"),
            HookPoint::ResidPost { layer, pos } => write!(f, "resid_post[L{layer}, p{pos}]"),
            HookPoint::AttnOut { layer, pos } => write!(f, "attn_out[L{layer}, p{pos}]"),
            HookPoint::HeadOut { layer, head, pos } => write!(f, "head_out[L{layer}H{head}, p{pos}]"),
            HookPoint::MlpOut { layer, pos } => write!(f, "mlp_out[L{layer}, p{pos}]"),
            HookPoint::NeuronAct { layer, neuron, pos } => write!(f, "neuron_act[L{layer}N{neuron}, p{pos}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    /// Overwrite the activation.
    Set(Vec<f64>),
    /// Add to the activation.
    Add(Vec<f64>),
}

impl InterventionMode {
    pub fn value(&self) -> &[f64] {
        match self {
            InterventionMode::Set(v) | InterventionMode::Add(v) => v,
        }
    }

    pub(crate) fn apply(&self, target: &mut [f64]) {
        match self {
            InterventionMode::Set(v) => target.copy_from_slice(v),
            InterventionMode::Add(v) => target.iter_mut().zip(v).for_each(|(t, a)| *t += a),
        }
    }
}

/// A do-operator override applied the moment `target` is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub target: HookPoint,
    pub mode: InterventionMode,
}

impl Intervention {
    pub fn set(target: HookPoint, value: Vec<f64>) -> Self {
        Self { target, mode: InterventionMode::Set(value) }
    }

    pub fn add(target: HookPoint, value: Vec<f64>) -> Self {
        Self { target, mode: InterventionMode::Add(value) }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        self.target.validate(config, seq_len)?;
        let width = self.target.width(config);
        let got = self.mode.value().len();
        if got != width {
            return Err(Error::DimensionMismatch { context: format!("intervention value at {}", self.target), expected: width, got });
        }
        if self.mode.value().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("intervention at {}", self.target)));
        }
        Ok(())
    }
}
