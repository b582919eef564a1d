// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures for the benchmarks.

use circuit_lens_core::grammar::{generate_dataset, Split};
use circuit_lens_core::planted::{build_planted_model, PlantedCircuitSpec, PlantedModel};
use circuit_lens_core::{Dataset, Model, ModelConfig, ModelWeights};

/// Default noisy planted model and an English dataset of `n` pairs.
pub fn planted_fixture(n: usize) -> (PlantedModel, Dataset) {
    let planted = build_planted_model(&PlantedCircuitSpec::new(0)).expect("default spec is valid");
    let ds = generate_dataset(&planted.english, n, 0, Split::Train).expect("lexicon has room");
    (planted, ds)
}

/// Random model with the planted architecture.
pub fn random_fixture(seed: u64) -> Model {
    let (p, _) = planted_fixture(1);
    let config: ModelConfig = p.model.config;
    let weights = ModelWeights::random(&config, seed);
    Model::new(config, weights).expect("random weights are valid")
}
