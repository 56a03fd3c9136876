use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use memfigless_bench::profiled;
use memfigless_core::{fit_forest, grid_search, Hyperparams, ParamGrid};

fn training(c: &mut Criterion) {
    let (_, _, samples) = profiled("graph-bfs", 50, 3);
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    for trees in [50, 100] {
        let params = Hyperparams {
            n_estimators: trees,
            ..Hyperparams::default()
        };
        g.bench_function(format!("fit_{trees}_trees_3450_rows"), |b| {
            b.iter(|| fit_forest(black_box(&samples), &params, 1).unwrap())
        });
    }
    let (_, _, small) = profiled("graph-bfs", 10, 1);
    let grid = ParamGrid {
        n_estimators: vec![20, 50],
        ..ParamGrid::default()
    };
    g.bench_function("grid_search_24_points_230_rows", |b| {
        b.iter(|| grid_search(black_box(&small), &grid, 5, 1).unwrap())
    });
    g.finish();
}

criterion_group!(benches, training);
criterion_main!(benches);
