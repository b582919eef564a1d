// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use circuit_lens_core::attribution::{
    attribution_report, mean_ov_weighted_pattern, neuron_report, promoted_tokens, top_k_tokens, NormHandling, ScoredToken, Sign,
};
use circuit_lens_core::directions::{
    alpha_sweep, collect_head_outputs, neuron_composition, oriented_components, steer, AlphaSweep, Direction, DirectionSource, SteerSign,
    SteeringReport, SteeringSpec, WeightKind, SIGN_CONVENTION,
};
use circuit_lens_core::grammar::{generate_dataset, toy_lexicon, LanguageSpec, Split};
use circuit_lens_core::io::{
    grid_to_csv, grid_to_svg, load_dataset, load_model, load_vocab, matrix_to_csv, read_json, save_dataset, save_model, GridView,
    TensorDtype, CONFIG_FILE, TENSOR_BLOB, TENSOR_HEADER, VOCAB_FILE,
};
use circuit_lens_core::patching::{compute_grid, PatchGrid, PatchTarget, Schedule};
use circuit_lens_core::planted::{build_planted_model, oracle_check, AnalysisOutputs, PlantedCircuitSpec, PlantedOracle};
use circuit_lens_core::{Dataset, Model};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::output::{Artifacts, RunRecord};
use crate::CliError;

pub const ORACLE_FILE: &str = "oracle.json";
/// Exit status of a completed oracle check that failed a criterion.
pub const ORACLE_FAILED: u8 = 3;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command, argv: &[String]) -> Result<u8> {
    if let Command::Replay(a) = &command {
        return replay(a);
    }
    let name = command.name();
    let (record, code) = execute(command, argv)?;
    println!("{}", json!({"command": name, "artifacts": record.artifacts.keys().collect::<Vec<_>>(), "status": code}));
    Ok(code)
}

/// Runs a non-replay command and writes its run record.
fn execute(command: Command, argv: &[String]) -> Result<(RunRecord, u8)> {
    let name = command.name();
    let (artifacts, flags, seed, code) = match command {
        Command::Replay(_) => return Err(CliError::new("invalid_argument", "a replay record cannot replay itself")),
        Command::GenData(a) => (gen_data(&a)?, to_flags(&a)?, Some(a.seed), 0),
        Command::Plant(a) => (plant(&a)?, to_flags(&a)?, Some(a.seed), 0),
        Command::Patch(a) => (patch(&a)?, to_flags(&a)?, None, 0),
        Command::Dlda(a) => (dlda(&a)?, to_flags(&a)?, None, 0),
        Command::Neurons(a) => (neurons(&a)?, to_flags(&a)?, None, 0),
        Command::Tokens(a) => (tokens(&a)?, to_flags(&a)?, None, 0),
        Command::Pca(a) => (pca_cmd(&a)?, to_flags(&a)?, None, 0),
        Command::Compose(a) => (compose(&a)?, to_flags(&a)?, None, 0),
        Command::Steer(a) => (steer_cmd(&a)?, to_flags(&a)?, None, 0),
        Command::SweepAlpha(a) => (sweep(&a)?, to_flags(&a)?, None, 0),
        Command::OracleCheck(a) => {
            let (artifacts, passed) = oracle(&a)?;
            (artifacts, to_flags(&a)?, None, if passed { 0 } else { ORACLE_FAILED })
        }
        Command::Pattern(a) => (pattern(&a)?, to_flags(&a)?, None, 0),
    };
    Ok((artifacts.finish(name, argv, flags, seed)?, code))
}

fn to_flags<T: Serialize>(args: &T) -> Result<serde_json::Value> {
    serde_json::to_value(args).map_err(|e| CliError::new("json", e.to_string()))
}

fn reject_formats(output: &Output, allowed: &[Format]) -> Result<()> {
    for f in &output.format {
        if *f != Format::Json && !allowed.contains(f) {
            return Err(CliError::new("invalid_argument", format!("format {f:?} is not available for this command")));
        }
    }
    Ok(())
}

fn load_pair(input: &ModelData) -> Result<(Model, Dataset)> {
    let model = load_model(&input.model)?;
    let ds = load_dataset(&input.dataset)?;
    for p in &ds.pairs {
        p.clean.validate(&model.config)?;
        p.corrupted.validate(&model.config)?;
        for t in [p.g, p.b] {
            if t as usize >= model.config.vocab_size {
                return Err(circuit_lens_core::Error::TokenOutOfRange { token: t, vocab_size: model.config.vocab_size }.into());
            }
        }
    }
    Ok((model, ds))
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(s.parse::<Split>()?)
}

fn gen_data(a: &GenDataArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[])?;
    let lex = toy_lexicon();
    let (spec, label): (LanguageSpec, String) = match lex.language(&a.language) {
        Some(s) => (s.clone(), a.language.clone()),
        None => {
            let path = Path::new(&a.language);
            if !path.exists() {
                return Err(CliError::new("invalid_language", format!("`{}` is neither a built-in language nor a file", a.language)));
            }
            let spec: LanguageSpec = read_json(path)?;
            let name = spec.name.clone();
            (spec, name)
        }
    };
    let split = parse_split(&a.split)?;
    let ds = generate_dataset(&spec, a.n, a.seed, split)?;
    let stem = a.name.clone().unwrap_or_else(|| format!("{label}_{split}"));
    let mut art = Artifacts::new(&a.output.out)?;
    let file = format!("{stem}.jsonl");
    let meta = save_dataset(&art.dir().join(&file), &ds)?;
    art.record(&file)?;
    art.record(&meta.file_name().expect("file").to_string_lossy())?;
    Ok(art)
}

fn plant(a: &PlantArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[])?;
    let mut spec = if a.linear { PlantedCircuitSpec::linear(a.seed) } else { PlantedCircuitSpec::new(a.seed) };
    spec.write_scale = a.write_scale;
    spec.noise_std = match (a.noise_std, a.linear) {
        (Some(s), _) => s,
        (None, true) => 0.0,
        (None, false) => 0.02 * a.write_scale,
    };
    let planted = build_planted_model(&spec)?;
    let dtype = match a.dtype {
        DtypeArg::F32 => TensorDtype::F32,
        DtypeArg::F64 => TensorDtype::F64,
    };
    let mut art = Artifacts::new(&a.output.out)?;
    save_model(art.dir(), &planted.model, dtype, Some(&planted.vocab))?;
    for f in [CONFIG_FILE, TENSOR_HEADER, TENSOR_BLOB, VOCAB_FILE] {
        art.record(f)?;
    }
    let mut oracle = planted.oracle.clone();
    if dtype == TensorDtype::F32 {
        // the stored weights are rounded, so the id must describe them
        oracle.model_id = load_model(art.dir())?.fingerprint();
    }
    art.write_json(ORACLE_FILE, &oracle)?;
    art.write_json("planted_spec.json", &spec)?;
    art.write_json("lang_english.json", &planted.english)?;
    art.write_json("lang_spanish.json", &planted.spanish)?;
    Ok(art)
}

fn view(v: ViewArg) -> GridView {
    match v {
        ViewArg::Raw => GridView::Raw,
        ViewArg::Delta => GridView::Delta,
        ViewArg::Normalized => GridView::Normalized,
    }
}

fn patch(a: &PatchArgs) -> Result<Artifacts> {
    let (model, ds) = load_pair(&a.input)?;
    let family: PatchTarget = a.family.parse()?;
    let schedule = if a.serial { Schedule::Serial } else { Schedule::Parallel };
    let grid = compute_grid(&model, &ds, family, schedule)?;
    let mut art = Artifacts::new(&a.output.out)?;
    let stem = format!("patch_{}", family.name());
    art.write_json(&format!("{stem}.json"), &grid)?;
    if a.output.wants(Format::Csv) {
        art.write(&format!("{stem}.csv"), grid_to_csv(&grid, view(a.view))?)?;
    }
    if a.output.wants(Format::Svg) {
        art.write(&format!("{stem}.svg"), grid_to_svg(&grid, view(a.view))?)?;
    }
    Ok(art)
}

fn norm_handling(raw: bool) -> NormHandling {
    if raw {
        NormHandling::Raw
    } else {
        NormHandling::Frozen
    }
}

fn dlda(a: &DldaArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[Format::Csv])?;
    let (model, ds) = load_pair(&a.input)?;
    let report = attribution_report(&model, &ds, a.layer, norm_handling(a.raw))?;
    let mut art = Artifacts::new(&a.output.out)?;
    art.write_json("dlda.json", &report)?;
    if a.output.wants(Format::Csv) {
        let mut labels = vec!["embedding".to_string()];
        let mut values = vec![vec![report.embedding]];
        for (l, v) in report.attn.iter().enumerate() {
            labels.push(format!("attn L{l}"));
            values.push(vec![*v]);
        }
        for (l, v) in report.mlp.iter().enumerate() {
            labels.push(format!("mlp L{l}"));
            values.push(vec![*v]);
        }
        for (l, row) in report.heads.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                labels.push(format!("head L{l}H{h}"));
                values.push(vec![*v]);
            }
        }
        art.write("dlda.csv", matrix_to_csv("component", &labels, &["dlda".into()], &values)?)?;
    }
    Ok(art)
}

fn neurons(a: &NeuronsArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[Format::Csv])?;
    let (model, ds) = load_pair(&a.input)?;
    let report = neuron_report(&model, &ds, a.layer, norm_handling(a.raw))?;
    let mut art = Artifacts::new(&a.output.out)?;
    let stem = format!("neurons_L{}", a.layer);
    art.write_json(&format!("{stem}.json"), &report)?;
    if a.output.wants(Format::Csv) {
        let labels: Vec<String> = (0..report.values.len()).map(|n| n.to_string()).collect();
        let values: Vec<Vec<f64>> = report.values.iter().map(|v| vec![*v]).collect();
        art.write(&format!("{stem}.csv"), matrix_to_csv("neuron", &labels, &["dlda".into()], &values)?)?;
    }
    Ok(art)
}

#[derive(Serialize)]
struct TokenScore {
    token_string: String,
    score: f64,
}

fn labeled(tokens: &[ScoredToken], vocab: &Option<Vec<String>>) -> Vec<TokenScore> {
    tokens
        .iter()
        .map(|t| TokenScore {
            token_string: vocab.as_ref().and_then(|v| v.get(t.token as usize).cloned()).unwrap_or_else(|| format!("<{}>", t.token)),
            score: t.score,
        })
        .collect()
}

fn tokens(a: &TokensArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[])?;
    let model = load_model(&a.model)?;
    let vocab = load_vocab(&a.model)?;
    let mut art = Artifacts::new(&a.output.out)?;
    match (a.neuron, &a.dataset) {
        (Some(neuron), _) => {
            let layer = a.layer.expect("clap enforces --layer with --neuron");
            let sign = match a.sign {
                SignArg::Positive => Sign::Positive,
                SignArg::Negative => Sign::Negative,
            };
            let ranked = promoted_tokens(&model, layer, neuron, sign, a.k, !a.no_gamma)?;
            let sign_name = if sign == Sign::Positive { "positive" } else { "negative" };
            art.write_json(
                &format!("tokens_L{layer}N{neuron}_{sign_name}.json"),
                &json!({
                    "model_id": model.fingerprint(),
                    "layer": layer,
                    "neuron": neuron,
                    "sign": sign,
                    "apply_gamma": !a.no_gamma,
                    "tokens": labeled(&ranked, &vocab),
                }),
            )?;
        }
        (None, Some(path)) => {
            let ds = load_dataset(path)?;
            let pair =
                ds.pairs.get(a.index).ok_or_else(|| CliError::new("out_of_range", format!("pair {} of {}", a.index, ds.pairs.len())))?;
            let out = model.forward(&pair.clean, &[])?;
            let ranked = top_k_tokens(out.last_logits(), a.k)?;
            art.write_json(
                &format!("top_tokens_{}.json", a.index),
                &json!({
                    "model_id": model.fingerprint(),
                    "index": a.index,
                    "input": pair.token_labels,
                    "tokens": labeled(&ranked, &vocab),
                }),
            )?;
        }
        (None, None) => return Err(CliError::new("usage", "tokens needs --layer and --neuron, or --dataset")),
    }
    Ok(art)
}

fn pca_cmd(a: &PcaArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[Format::Csv])?;
    let (model, ds) = load_pair(&a.input)?;
    let samples = collect_head_outputs(&model, &ds, a.layer, a.head)?;
    let pcs = oriented_components(&samples, a.k)?;
    let direction = Direction {
        vector: pcs[0].vector.to_vec(),
        source: DirectionSource { layer: a.layer, head: a.head, fit_dataset: format!("{}/{}/seed{}", ds.language, ds.split, ds.seed) },
        explained_variance_ratio: pcs[0].explained_variance_ratio,
        sign_convention: SIGN_CONVENTION.into(),
    };
    let projections: Vec<Vec<f64>> = samples.rows.rows().into_iter().map(|r| pcs.iter().map(|pc| r.dot(&pc.vector)).collect()).collect();
    let mut art = Artifacts::new(&a.output.out)?;
    art.write_json("direction.json", &direction)?;
    art.write_json(
        "pca.json",
        &json!({
            "model_id": model.fingerprint(),
            "layer": a.layer,
            "head": a.head,
            "components": pcs.iter().map(|pc| json!({
                "vector": pc.vector.to_vec(),
                "explained_variance_ratio": pc.explained_variance_ratio,
            })).collect::<Vec<_>>(),
            "labels": samples.labels,
            "projections": projections,
        }),
    )?;
    if a.output.wants(Format::Csv) {
        let labels: Vec<String> = samples.labels.iter().map(|l| l.to_string()).collect();
        let cols: Vec<String> = (1..=pcs.len()).map(|i| format!("PC{i}")).collect();
        art.write("pca_projections.csv", matrix_to_csv("subject_number", &labels, &cols, &projections)?)?;
    }
    Ok(art)
}

fn compose(a: &ComposeArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[])?;
    let (model, ds) = load_pair(&a.input)?;
    let samples = collect_head_outputs(&model, &ds, a.layer, a.head)?;
    let which = match a.which {
        WhichArg::WIn => WeightKind::In,
        WhichArg::WGate => WeightKind::Gate,
    };
    let c = neuron_composition(&samples, &model, a.mlp_layer, a.neuron, which)?;
    let mut value = serde_json::to_value(&c).map_err(|e| CliError::new("json", e.to_string()))?;
    value["model_id"] = json!(model.fingerprint());
    value["head"] = json!({"layer": a.layer, "head": a.head});
    let which_name = if which == WeightKind::In { "W_in" } else { "W_gate" };
    let mut art = Artifacts::new(&a.output.out)?;
    art.write_json(&format!("compose_L{}H{}_L{}N{}_{which_name}.json", a.layer, a.head, a.mlp_layer, a.neuron), &value)?;
    Ok(art)
}

fn steer_cmd(a: &SteerArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[Format::Csv])?;
    let (model, ds) = load_pair(&a.input)?;
    let direction: Direction = read_json(&a.direction)?;
    let alpha = match (a.alpha, &a.alpha_from) {
        (Some(x), _) => x,
        (None, Some(path)) => read_json::<AlphaSweep>(path)?.chosen_alpha,
        (None, None) => unreachable!("clap requires one of --alpha and --alpha-from"),
    };
    let sign = a.sign.as_deref().map(|s| if s == "+" { SteerSign::Plus } else { SteerSign::Minus });
    let spec = SteeringSpec {
        layer: a.layer.unwrap_or(direction.source.layer),
        head: a.head.unwrap_or(direction.source.head),
        direction,
        alpha,
        sign,
    };
    let report = steer(&model, &ds, &spec)?;
    let mut art = Artifacts::new(&a.output.out)?;
    art.write_json("steering.json", &report)?;
    if a.output.wants(Format::Csv) {
        art.write("steering.csv", steering_csv(&report)?)?;
    }
    Ok(art)
}

fn steering_csv(r: &SteeringReport) -> Result<String> {
    let labels: Vec<String> = (0..r.pairs.len()).map(|i| i.to_string()).collect();
    let cols = ["subject_plural", "sign", "pre_ld", "post_ld", "flipped"].map(String::from);
    let values: Vec<Vec<f64>> = r
        .pairs
        .iter()
        .map(|p| {
            vec![
                f64::from(u8::from(p.subject_number == circuit_lens_core::Number::Plur)),
                if p.sign == SteerSign::Plus { 1.0 } else { -1.0 },
                p.pre_ld,
                p.post_ld,
                f64::from(u8::from(p.flipped)),
            ]
        })
        .collect();
    Ok(matrix_to_csv("pair", &labels, &cols, &values)?)
}

fn read_oracle(model_dir: &Path) -> Result<PlantedOracle> {
    let path = model_dir.join(ORACLE_FILE);
    if !path.exists() {
        return Err(CliError::new("missing_oracle", format!("{} not found", path.display())));
    }
    Ok(read_json(&path)?)
}

fn sweep(a: &SweepArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[])?;
    let (model, ds) = load_pair(&a.input)?;
    let direction: Direction = read_json(&a.direction)?;
    let grid = match &a.grid {
        Some(g) => g.clone(),
        None => {
            let w = read_oracle(&a.input.model)?.write_scale;
            [0.0, 0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|x| x * w).collect()
        }
    };
    let layer = a.layer.unwrap_or(direction.source.layer);
    let head = a.head.unwrap_or(direction.source.head);
    let s = alpha_sweep(&model, &ds, &direction, layer, head, &grid)?;
    let mut art = Artifacts::new(&a.output.out)?;
    art.write_json("alpha_sweep.json", &s)?;
    Ok(art)
}

fn oracle(a: &OracleArgs) -> Result<(Artifacts, bool)> {
    reject_formats(&a.output, &[])?;
    let oracle = read_oracle(&a.model)?;
    let grid: PatchGrid = read_json(&a.grid)?;
    let neurons = read_json(&a.neurons)?;
    let pc1: Direction = read_json(&a.direction)?;
    let steering = a.steering.iter().map(|p| Ok(read_json::<SteeringReport>(p)?)).collect::<Result<Vec<_>>>()?;
    let report = oracle_check(&oracle, AnalysisOutputs { head_grid: &grid, neurons: &neurons, pc1: &pc1, steering: &steering })?;
    let mut art = Artifacts::new(&a.output.out)?;
    art.write_json("oracle_report.json", &report)?;
    Ok((art, report.passed))
}

fn pattern(a: &PatternArgs) -> Result<Artifacts> {
    reject_formats(&a.output, &[Format::Csv])?;
    let (model, ds) = load_pair(&a.input)?;
    let h = mean_ov_weighted_pattern(&model, &ds, a.layer, a.head)?;
    let labels = ds.pairs[0].token_labels.clone();
    let rows: Vec<Vec<f64>> = h.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut art = Artifacts::new(&a.output.out)?;
    let stem = format!("pattern_L{}H{}", a.layer, a.head);
    art.write_json(
        &format!("{stem}.json"),
        &json!({"model_id": model.fingerprint(), "layer": a.layer, "head": a.head, "example_labels": labels, "pattern": rows}),
    )?;
    if a.output.wants(Format::Csv) {
        let pos: Vec<String> = (0..rows.len()).map(|p| format!("pos{p}")).collect();
        art.write(&format!("{stem}.csv"), matrix_to_csv("query", &pos, &pos, &rows)?)?;
    }
    Ok(art)
}

fn replay(a: &ReplayArgs) -> Result<u8> {
    let record: RunRecord = read_json(&a.run)?;
    let mut argv = vec!["circuit-lens".to_string()];
    argv.extend(record.argv.iter().cloned());
    let cli = <Cli as clap::Parser>::try_parse_from(&argv).map_err(|e| CliError::new("usage", e.to_string()))?;
    let (fresh, code) = execute(cli.command, &record.argv)?;
    let mismatched: Vec<&String> =
        record.artifacts.iter().filter(|(name, hash)| fresh.artifacts.get(*name) != Some(hash)).map(|(name, _)| name).collect();
    println!("{}", json!({"replayed": record.command, "identical": mismatched.is_empty(), "mismatched": mismatched}));
    if !mismatched.is_empty() {
        return Err(CliError::new("replay_mismatch", format!("artifacts differ from the recorded run: {mismatched:?}")));
    }
    Ok(code)
}
