// SPDX-License-Identifier: MIT OR Apache-2.0

use circuit_lens_bench::planted_fixture;
use circuit_lens_core::{HookPoint, Intervention};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let (p, ds) = planted_fixture(4);
    let tokens = &ds.pairs[0].clean;
    c.bench_function("forward/planted", |b| b.iter(|| p.model.forward(black_box(tokens), &[]).unwrap()));

    let d = p.model.config.d_model;
    let iv = [Intervention::add(HookPoint::HeadOut { layer: 2, head: 1, pos: 5 }, vec![0.1; d])];
    c.bench_function("forward/planted_with_hook", |b| b.iter(|| p.model.forward(black_box(tokens), &iv).unwrap()));
}

criterion_group!(benches, forward);
criterion_main!(benches);
