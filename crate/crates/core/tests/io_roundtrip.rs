// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::Command;

use circuit_lens_core::grammar::generate_dataset;
use circuit_lens_core::io::{load_dataset, load_model, load_vocab, save_dataset, save_model, TensorDtype, TENSOR_HEADER};
use circuit_lens_core::planted::{build_planted_model, PlantedCircuitSpec};
use circuit_lens_core::{Error, Split, TokenSequence};

fn planted() -> circuit_lens_core::planted::PlantedModel {
    build_planted_model(&PlantedCircuitSpec::new(4)).unwrap()
}

#[test]
fn f64_round_trip_is_exact() {
    let p = planted();
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &p.model, TensorDtype::F64, Some(&p.vocab)).unwrap();
    let back = load_model(dir.path()).unwrap();
    assert_eq!(back.config, p.model.config);
    assert_eq!(back.weights, p.model.weights);
    assert_eq!(back.fingerprint(), p.model.fingerprint());
    assert_eq!(load_vocab(dir.path()).unwrap().unwrap(), p.vocab);
}

#[test]
fn f32_round_trip_is_close() {
    let p = planted();
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &p.model, TensorDtype::F32, None).unwrap();
    let back = load_model(dir.path()).unwrap();
    assert!(load_vocab(dir.path()).unwrap().is_none());
    let toks = TokenSequence::new(generate_dataset(&p.english, 1, 0, Split::Test).unwrap().pairs[0].clean.ids().to_vec());
    let a = p.model.forward(&toks, &[]).unwrap().logits;
    let b = back.forward(&toks, &[]).unwrap().logits;
    let worst = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn config_and_tensor_shapes_must_agree() {
    let p = planted();
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &p.model, TensorDtype::F64, None).unwrap();
    let path = dir.path().join("config.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"d_mlp\": 256", "\"d_mlp\": 128");
    assert!(text.contains("128"));
    fs::write(&path, text).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn truncated_blob_is_rejected() {
    let p = planted();
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &p.model, TensorDtype::F64, None).unwrap();
    let blob = dir.path().join("tensors.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::TruncatedBlob { .. })));
}

fn python() -> Option<&'static str> {
    Command::new("python3").arg("--version").output().ok().filter(|o| o.status.success()).map(|_| "python3")
}

#[test]
fn python_reader_agrees() {
    let Some(py) = python() else {
        eprintln!("python3 not found; skipping cross-reader check");
        return;
    };
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/read_manifest.py");
    let p = planted();
    for dtype in [TensorDtype::F64, TensorDtype::F32] {
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &p.model, dtype, None).unwrap();
        let out = Command::new(py).arg(&script).arg(dir.path()).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let seen: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let tensors = p.model.weights.named_tensors();
        assert_eq!(seen.as_object().unwrap().len(), tensors.len());
        for (name, shape, data) in tensors {
            let e = &seen[&name];
            let num = |k: &str| e[k].as_str().unwrap().parse::<f64>().unwrap();
            let cast = |x: f64| if dtype == TensorDtype::F32 { x as f32 as f64 } else { x };
            assert_eq!(e["shape"], serde_json::json!(shape), "{name}");
            assert_eq!(num("first"), cast(data[0]), "{name}");
            assert_eq!(num("last"), cast(*data.last().unwrap()), "{name}");
            let sum: f64 = data.iter().map(|&x| cast(x)).sum();
            assert!((num("sum") - sum).abs() <= 1e-9 * (1.0 + sum.abs()), "{name}");
        }
        assert!(dir.path().join(TENSOR_HEADER).exists());
    }
}

#[test]
fn datasets_round_trip_and_regenerate_identically() {
    let p = planted();
    let dir = tempfile::tempdir().unwrap();
    for (lang, split) in [(&p.english, Split::Train), (&p.spanish, Split::Test)] {
        let ds = generate_dataset(lang, 50, 9, split).unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_dataset(&a, &ds).unwrap();
        save_dataset(&b, &generate_dataset(lang, 50, 9, split).unwrap()).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read(dir.path().join("a.meta.json")).unwrap(), fs::read(dir.path().join("b.meta.json")).unwrap());
        assert_eq!(load_dataset(&a).unwrap(), ds);
    }
}
