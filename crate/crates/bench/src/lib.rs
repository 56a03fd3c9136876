//! Fixtures shared by the benchmarks.

use memfigless_core::forest::Samples;
use memfigless_core::profiler::{training_samples, PayloadGrid, Range};
use memfigless_core::sim::find_preset;
use memfigless_core::{run_profile, CostModel, Dataset, FunctionModel, ProfilePlan, Simulator};

/// Profiles `preset` over `payloads` evenly spaced sizes and the 23-point memory grid.
pub fn profiled(
    preset: &str,
    payloads: usize,
    iterations: u32,
) -> (FunctionModel, Dataset, Samples) {
    let model = find_preset(preset).expect("known preset");
    let step = 10_000.0 / payloads as f64;
    let plan = ProfilePlan {
        function: model.name.clone(),
        payload_grid: PayloadGrid::Ranges(vec![
            Range {
                min: 10.0,
                max: 10.0 + step * (payloads - 1) as f64,
                step
            };
            model.payload_dims
        ]),
        memory_grid: Range {
            min: 128.0,
            max: 3008.0,
            step: 128.0,
        },
        iterations,
        seed: 1,
    };
    let mut sim = Simulator::new([model.clone()], CostModel::default(), 1).expect("valid preset");
    let ds = run_profile(&plan, &mut sim).expect("plan runs");
    let samples = training_samples(&ds.records).expect("non-empty dataset");
    (model, ds, samples)
}
