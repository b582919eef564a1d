// SPDX-License-Identifier: MIT OR Apache-2.0

use circuit_lens_bench::planted_fixture;
use circuit_lens_core::attribution::{attribution_report, NormHandling};
use circuit_lens_core::directions::collect_head_outputs;
use circuit_lens_core::patching::{compute_grid, PatchTarget, Schedule};
use circuit_lens_core::pca::pca;
use criterion::{criterion_group, criterion_main, Criterion};

fn analysis(c: &mut Criterion) {
    let (p, ds) = planted_fixture(16);
    let m = &p.model;
    let mut g = c.benchmark_group("analysis");
    g.sample_size(10);
    for schedule in [Schedule::Serial, Schedule::Parallel] {
        g.bench_function(format!("head_grid/{schedule:?}"), |b| {
            b.iter(|| compute_grid(m, &ds, PatchTarget::HeadOutLastPos, schedule).unwrap())
        });
    }
    g.bench_function("dlda", |b| b.iter(|| attribution_report(m, &ds, Some(3), NormHandling::Frozen).unwrap()));
    let samples = collect_head_outputs(m, &ds, 2, 1).unwrap();
    g.bench_function("pca/k2", |b| b.iter(|| pca(samples.rows.view(), 2).unwrap()));
    g.finish();
}

criterion_group!(benches, analysis);
criterion_main!(benches);
