use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use memfigless_bench::profiled;
use memfigless_core::optimizer::{enumerate_candidates, pareto_front};
use memfigless_core::{
    derive_default_constraints, fit_forest, select_configuration, CostModel, Hyperparams,
    MemoryRange, PayloadVector, SelectionPolicy,
};

fn selection(c: &mut Criterion) {
    let (_, ds, samples) = profiled("linpack", 50, 1);
    let forest = fit_forest(&samples, &Hyperparams::default(), 1).unwrap();
    let constraints = derive_default_constraints(&ds.records, 1.5).unwrap();
    let payload = PayloadVector::new(vec![4810.0]).unwrap();
    let cm = CostModel::default();
    let policy = SelectionPolicy::default();
    let cands = enumerate_candidates(&forest, &payload, MemoryRange::default(), 1, &cm).unwrap();

    let mut g = c.benchmark_group("selection");
    g.bench_function("enumerate_2881_candidates", |b| {
        b.iter(|| {
            enumerate_candidates(&forest, black_box(&payload), MemoryRange::default(), 1, &cm)
                .unwrap()
        })
    });
    g.bench_function("pareto_front_2881", |b| {
        b.iter(|| pareto_front(black_box(&cands)))
    });
    g.bench_function("select_configuration_2881", |b| {
        b.iter(|| select_configuration(black_box(&cands), &constraints, &policy))
    });
    g.finish();
}

criterion_group!(benches, selection);
criterion_main!(benches);
