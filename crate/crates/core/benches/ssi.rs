use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ssilab_core::neurons::{consistency_matrix, ConsistencyStrategy};
use ssilab_core::ssi::{compute_deltas_with, compute_ssi_with, DeltaSet, NormalizationPolicy, SimilarityKernel, SsiOptions};
use ssilab_core::synth::{generate, SignatureMode, SynthConfig};
use ssilab_core::Backend;

fn backends() -> Vec<(&'static str, Backend)> {
    let mut v = vec![("sequential", Backend::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Backend::Parallel));
    v
}

fn deltas(n: usize, dim: usize) -> DeltaSet {
    let cfg = SynthConfig::new(4, n, 4, dim, SignatureMode::RandomUnit, 1.0, 42);
    compute_deltas_with(&generate(&cfg).unwrap(), NormalizationPolicy::default(), Backend::Sequential)
}

fn bench_ssi(c: &mut Criterion) {
    let mut group = c.benchmark_group("ssi_exact");
    group.sample_size(10);
    let d = deltas(200, 256);
    for (name, backend) in backends() {
        for (kname, kernel) in [("unit_sum", SimilarityKernel::UnitSum), ("pairwise", SimilarityKernel::Pairwise)] {
            let opts = SsiOptions { kernel, backend, ..Default::default() };
            group.bench_function(BenchmarkId::new(kname, name), |b| b.iter(|| compute_ssi_with(black_box(&d), &opts).unwrap()));
        }
    }
    group.finish();
}

fn bench_deltas(c: &mut Criterion) {
    let mut group = c.benchmark_group("deltas");
    group.sample_size(10);
    let cfg = SynthConfig::new(4, 200, 4, 256, SignatureMode::RandomUnit, 1.0, 42);
    let dump = generate(&cfg).unwrap();
    for (name, backend) in backends() {
        group.bench_function(name, |b| b.iter(|| compute_deltas_with(black_box(&dump), NormalizationPolicy::default(), backend)));
    }
    group.finish();
}

fn bench_neurons(c: &mut Criterion) {
    let mut group = c.benchmark_group("neuron_consistency");
    group.sample_size(10);
    let d = deltas(200, 256);
    for (name, backend) in backends() {
        group.bench_function(name, |b| {
            b.iter(|| consistency_matrix(black_box(&d), ConsistencyStrategy::default(), backend).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_ssi, bench_deltas, bench_neurons);
criterion_main!(benches);
