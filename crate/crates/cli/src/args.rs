// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "circuit-lens", version, about = "Circuit analysis for subject-verb agreement in small decoder models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a contrastive-pair dataset as JSONL.
    GenData(GenDataArgs),
    /// Build a planted-circuit model and its oracle.
    Plant(PlantArgs),
    /// Activation patching over one hook family.
    Patch(PatchArgs),
    /// Direct logit-difference attribution per component.
    Dlda(DldaArgs),
    /// Per-neuron attribution for one MLP layer.
    Neurons(NeuronsArgs),
    /// Tokens promoted by a neuron, or top next-token predictions.
    Tokens(TokensArgs),
    /// Principal components of a head's last-position outputs.
    Pca(PcaArgs),
    /// Head outputs dotted with a neuron's input weights.
    Compose(ComposeArgs),
    /// Add a direction to a head output and measure sign flips.
    Steer(SteerArgs),
    /// Choose a steering coefficient on a validation set.
    SweepAlpha(SweepArgs),
    /// Score analysis artifacts against a planted model's oracle.
    OracleCheck(OracleArgs),
    /// Output-value weighted attention pattern of a head.
    Pattern(PatternArgs),
    /// Re-run the command recorded in a run.json and verify its artifacts.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Plant(_) => "plant",
            Command::Patch(_) => "patch",
            Command::Dlda(_) => "dlda",
            Command::Neurons(_) => "neurons",
            Command::Tokens(_) => "tokens",
            Command::Pca(_) => "pca",
            Command::Compose(_) => "compose",
            Command::Steer(_) => "steer",
            Command::SweepAlpha(_) => "sweep-alpha",
            Command::OracleCheck(_) => "oracle-check",
            Command::Pattern(_) => "pattern",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Svg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewArg {
    Raw,
    Delta,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SignArg {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum WhichArg {
    #[value(name = "W_in")]
    #[serde(rename = "W_in")]
    WIn,
    #[value(name = "W_gate")]
    #[serde(rename = "W_gate")]
    WGate,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Output {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Extra output formats; JSON is always written.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "json")]
    pub format: Vec<Format>,
}

impl Output {
    pub fn wants(&self, f: Format) -> bool {
        self.format.contains(&f)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// `english`, `spanish`, or a path to a language JSON file.
    #[arg(long)]
    pub language: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// File stem; defaults to `<language>_<split>`.
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlantArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to 0.02 times the write scale.
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long, default_value_t = circuit_lens_core::planted::DEFAULT_WRITE_SCALE)]
    pub write_scale: f64,
    /// Identity activation and neutralized norms.
    #[arg(long)]
    pub linear: bool,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelData {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PatchArgs {
    #[command(flatten)]
    pub input: ModelData,
    /// resid_pre_grid | attn_out_grid | mlp_out_grid | head_out_last_pos (or a-d).
    #[arg(long)]
    pub family: String,
    /// Grid values shown in CSV and SVG output.
    #[arg(long, value_enum, default_value = "delta")]
    pub view: ViewArg,
    /// Evaluate cells one at a time.
    #[arg(long)]
    pub serial: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DldaArgs {
    #[command(flatten)]
    pub input: ModelData,
    /// Also report per-neuron values for this MLP layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Ignore the final norm instead of freezing it.
    #[arg(long)]
    pub raw: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NeuronsArgs {
    #[command(flatten)]
    pub input: ModelData,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub raw: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TokensArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: Option<usize>,
    /// Rank by this neuron's output weights.
    #[arg(long, requires = "layer")]
    pub neuron: Option<usize>,
    #[arg(long, value_enum, default_value = "positive")]
    pub sign: SignArg,
    /// Leave out the final norm scale when ranking neuron tokens.
    #[arg(long)]
    pub no_gamma: bool,
    /// Rank next-token predictions for a clean input of this dataset instead.
    #[arg(long, conflicts_with = "neuron")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PcaArgs {
    #[command(flatten)]
    pub input: ModelData,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ComposeArgs {
    #[command(flatten)]
    pub input: ModelData,
    /// Layer of the attention head.
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    /// Layer of the MLP holding the neuron.
    #[arg(long)]
    pub mlp_layer: usize,
    #[arg(long)]
    pub neuron: usize,
    #[arg(long, value_enum, default_value = "W_in")]
    pub which: WhichArg,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SteerArgs {
    #[command(flatten)]
    pub input: ModelData,
    /// Direction JSON written by `pca`.
    #[arg(long)]
    pub direction: PathBuf,
    #[arg(long, required_unless_present = "alpha_from")]
    pub alpha: Option<f64>,
    /// Take alpha from a sweep written by `sweep-alpha`.
    #[arg(long, conflicts_with = "alpha")]
    pub alpha_from: Option<PathBuf>,
    /// Fixed sign; by default `+` on singular and `-` on plural inputs.
    #[arg(long, value_parser = ["+", "-"], allow_hyphen_values = true)]
    pub sign: Option<String>,
    /// Head to steer; defaults to the direction's source head.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: ModelData,
    #[arg(long)]
    pub direction: PathBuf,
    /// Comma-separated alphas; defaults to {0, 0.5, 1, 2, 4, 8} times the
    /// write scale when the model directory has an oracle.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    /// Planted model directory (holds oracle.json).
    #[arg(long)]
    pub model: PathBuf,
    /// Head patching grid JSON.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub neurons: PathBuf,
    #[arg(long)]
    pub direction: PathBuf,
    /// Steering report JSON; repeatable.
    #[arg(long, required = true)]
    pub steering: Vec<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PatternArgs {
    #[command(flatten)]
    pub input: ModelData,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReplayArgs {
    /// A run.json written by an earlier command.
    #[arg(long)]
    pub run: PathBuf,
}
