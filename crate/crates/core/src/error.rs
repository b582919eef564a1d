// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

use crate::model::HookPoint;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the model, analyses and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch { context: String, expected: usize, got: usize },

    #[error("tensor `{0}` contains a non-finite value")]
    NonFinite(String),

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence length {len} outside [1, {max_seq}]")]
    SequenceLength { len: usize, max_seq: usize },

    #[error("hook point {hook} does not exist: {reason}")]
    InvalidHook { hook: HookPoint, reason: String },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid language spec: {0}")]
    InvalidLanguage(String),

    #[error("token sequence does not match the template at position {position}: {reason}")]
    TemplateMismatch { position: usize, reason: String },

    #[error("lexicon too small: requested {requested} pairs but the {split} split holds {available}")]
    LexiconTooSmall { requested: usize, available: usize, split: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset pairs have inconsistent lengths ({first} vs {other})")]
    RaggedDataset { first: usize, other: usize },

    #[error("zero variance: all samples are identical")]
    ZeroVariance,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("analysis output belongs to model {got}, oracle expects {expected}")]
    ModelMismatch { expected: String, got: String },

    #[error("malformed manifest header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}` has shape {got:?}, config implies {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },

    #[error("blob truncated: tensor `{name}` needs bytes up to {needed}, blob has {len}")]
    TruncatedBlob { name: String, needed: usize, len: usize },

    #[error("tensor `{first}` overlaps or precedes `{second}` in the blob")]
    OverlappingOffsets { first: String, second: String },

    #[error("tensor `{0}` is missing from the manifest")]
    MissingTensor(String),

    #[error("unknown tensor name `{0}`")]
    UnknownTensor(String),

    #[error("grid is empty")]
    EmptyGrid,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::SequenceLength { .. } => "sequence_length",
            Error::InvalidHook { .. } => "invalid_hook",
            Error::OutOfRange(_) => "out_of_range",
            Error::InvalidLanguage(_) => "invalid_language",
            Error::TemplateMismatch { .. } => "template_mismatch",
            Error::LexiconTooSmall { .. } => "lexicon_too_small",
            Error::EmptyDataset => "empty_dataset",
            Error::RaggedDataset { .. } => "ragged_dataset",
            Error::ZeroVariance => "zero_variance",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ModelMismatch { .. } => "model_mismatch",
            Error::MalformedHeader(_) => "malformed_header",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::TruncatedBlob { .. } => "truncated_blob",
            Error::OverlappingOffsets { .. } => "overlapping_offsets",
            Error::MissingTensor(_) => "missing_tensor",
            Error::UnknownTensor(_) => "unknown_tensor",
            Error::EmptyGrid => "empty_grid",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
