// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit analysis for Gemma-style decoder-only transformers.
//!
//! The crate bundles a hookable double-precision forward pass together with
//! the analyses used to localize a subject-verb agreement circuit:
//!
//! - [`patching`]: denoising activation patching over residual streams,
//!   attention blocks, MLPs and individual heads.
//! - [`attribution`]: direct logit-difference attribution at component and
//!   neuron granularity, promoted tokens, output-value weighted attention.
//! - [`directions`]: PCA on head outputs, head-to-neuron composition and
//!   activation steering.
//! - [`grammar`]: token-aligned contrastive pairs in two toy languages.
//! - [`planted`]: small models with a handcrafted agreement circuit, used as
//!   ground truth for every analysis above.
//! - [`io`]: tensor manifest format, JSON helpers and SVG heatmaps.

pub mod attribution;
pub mod directions;
pub mod error;
pub mod grammar;
pub mod io;
pub mod model;
pub mod patching;
pub mod pca;
pub mod planted;

pub use error::{Error, Result};
pub use grammar::{ContrastivePair, Dataset, LanguageSpec, Number, Split};
pub use model::{
    logit_diff, Activation, ActivationCache, EmbedScale, ForwardOutput, HookPoint, Intervention, InterventionMode, LayerWeights, Model,
    ModelConfig, ModelWeights, NormOffset, TokenId, TokenSequence,
};
pub use patching::{PatchGrid, PatchTarget, Schedule};
