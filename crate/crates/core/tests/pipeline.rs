use std::io::BufReader;

use memfigless_core::forest::{load_model, save_model, score_outputs, tune_with_holdout};
use memfigless_core::manager::retrain;
use memfigless_core::manager::retrain_seed;
use memfigless_core::profiler::{training_samples, PayloadGrid, Range};
use memfigless_core::sim::{find_preset, required_memory};
use memfigless_core::*;

fn plan(function: &str, payload_step: f64, iterations: u32, seed: u64) -> ProfilePlan {
    ProfilePlan {
        function: function.into(),
        payload_grid: PayloadGrid::Ranges(vec![Range {
            min: 10.0,
            max: 10_000.0,
            step: payload_step,
        }]),
        memory_grid: Range {
            min: 128.0,
            max: 3008.0,
            step: 128.0,
        },
        iterations,
        seed,
    }
}

fn noise_free(name: &str) -> FunctionModel {
    FunctionModel {
        noise_sigma: 0.0,
        ..find_preset(name).unwrap()
    }
}

#[test]
fn dataset_and_model_survive_files() {
    let model = find_preset("graph-mst").unwrap();
    let p = plan("graph-mst", 1000.0, 2, 3);
    let mut sim = Simulator::new([model], CostModel::default(), p.seed).unwrap();
    let ds = run_profile(&p, &mut sim).unwrap();
    assert_eq!(ds.records.len(), 10 * 23 * 2);

    let dir = tempfile::tempdir().unwrap();
    let ds_path = dir.path().join("ds.jsonl");
    ds.write(std::fs::File::create(&ds_path).unwrap()).unwrap();
    let back = Dataset::read(BufReader::new(std::fs::File::open(&ds_path).unwrap())).unwrap();
    assert_eq!(back, ds);

    let samples = training_samples(&back.records).unwrap();
    let forest = fit_forest(
        &samples,
        &Hyperparams {
            n_estimators: 20,
            ..Hyperparams::default()
        },
        4,
    )
    .unwrap();
    let m_path = dir.path().join("model.json");
    save_model(&forest, &m_path).unwrap();
    let loaded = load_model(&m_path).unwrap();
    for i in 0..samples.len() {
        assert_eq!(
            loaded.predict(samples.features(i)).unwrap(),
            forest.predict(samples.features(i)).unwrap()
        );
    }
}

/// 100 trees on a noise-free 1150-row profile reach a held-out duration R² of 0.95.
#[test]
fn noise_free_duration_is_learned() {
    for name in ["graph-bfs", "matmul"] {
        let p = plan(name, 200.0, 1, 0);
        let mut sim = Simulator::new([noise_free(name)], CostModel::default(), 0).unwrap();
        let samples = training_samples(&run_profile(&p, &mut sim).unwrap().records).unwrap();
        assert_eq!(samples.len(), 1150);
        let grid = ParamGrid::single(Hyperparams::default());
        let out = tune_with_holdout(&samples, &grid, 5, 0.2, 1).unwrap();
        let dur = out.report.holdout.unwrap()[0].r2.unwrap();
        assert!(dur >= 0.95, "{name}: held-out duration R² {dur}");
    }
}

/// Predicted duration at 3008 MB is no higher than at 128 MB for every
/// profiled payload, with at most 2% of payloads allowed to disagree. The
/// model runs at 128 MB and keeps speeding up to 2048 MB, unlike the presets
/// whose floors and knees both sit above 128 MB.
#[test]
fn predicted_duration_falls_with_memory() {
    let model = FunctionModel {
        name: "scaling".into(),
        mem_base: 64.0,
        mem_per_unit: 0.005,
        ref_memory: 128.0,
        max_speedup: 16.0,
        ..noise_free("linpack")
    };
    let p = plan("scaling", 200.0, 1, 0);
    let mut sim = Simulator::new([model], CostModel::default(), 0).unwrap();
    let samples = training_samples(&run_profile(&p, &mut sim).unwrap().records).unwrap();
    let forest = fit_forest(&samples, &Hyperparams::default(), 2).unwrap();
    let payloads = p.payload_grid.expand().unwrap();
    let violations = payloads
        .iter()
        .filter(|pay| {
            let at = |m: f64| forest.predict(&[m, pay.values()[0]]).unwrap()[0];
            at(3008.0) > at(128.0)
        })
        .count();
    assert!(
        violations as f64 <= 0.02 * payloads.len() as f64,
        "{violations} payloads violate"
    );
}

#[test]
fn manager_retrains_on_the_latest_window() {
    let model = find_preset("dynamic-html").unwrap();
    let p = plan("dynamic-html", 1000.0, 1, 5);
    let mut sim = Simulator::new([model.clone()], CostModel::default(), 5).unwrap();
    let ds = run_profile(&p, &mut sim).unwrap();
    let params = Hyperparams {
        n_estimators: 10,
        ..Hyperparams::default()
    };
    let forest = fit_forest(&training_samples(&ds.records).unwrap(), &params, 5).unwrap();
    let constraints = derive_default_constraints(&ds.records, 1.5).unwrap();
    let config = ManagerConfig {
        monitoring_window: 40,
        retrain_window: 60,
        mem_step: 32,
        ..ManagerConfig::for_model(&forest, constraints, 11)
    };
    let backend = Simulator::new([model.clone()], CostModel::default(), 6).unwrap();
    let mut mgr = Manager::new(
        "dynamic-html",
        forest,
        config.clone(),
        backend,
        CostModel::default(),
    )
    .unwrap();

    let stream: Vec<PayloadVector> = (0..100)
        .map(|i| PayloadVector::new(vec![10.0 + (i * 97 % 100) as f64 * 99.0]).unwrap())
        .collect();
    let mut retrained_at = Vec::new();
    for (i, pay) in stream.iter().enumerate() {
        let r = mgr.handle_invocation(pay).unwrap();
        assert_eq!(mgr.store().len(), i + 1);
        assert_eq!(r.record.memory_size, r.memory);
        if r.retrained {
            retrained_at.push(i + 1);
        }
    }
    assert_eq!(retrained_at, vec![40, 80]);
    assert_eq!(mgr.retrain_count(), 2);

    // The second refit saw exactly records 21..=80 and is reproducible.
    let records = mgr.store().records();
    let first = retrain(&records[..40], mgr.forest(), &config, retrain_seed(11, 0)).unwrap();
    let second = retrain(&records[20..80], &first, &config, retrain_seed(11, 1)).unwrap();
    let x = [777.0, 4321.0];
    assert_eq!(
        second.predict(&x).unwrap(),
        mgr.forest().predict(&x).unwrap()
    );
}

#[test]
fn selection_respects_ground_truth_floor() {
    let model = find_preset("pyaes").unwrap();
    let p = ProfilePlan {
        payload_grid: PayloadGrid::Ranges(vec![
            Range {
                min: 10.0,
                max: 10_000.0,
                step: 1000.0
            };
            2
        ]),
        ..plan("pyaes", 1000.0, 2, 8)
    };
    let mut sim = Simulator::new([model.clone()], CostModel::default(), 8).unwrap();
    let ds = run_profile(&p, &mut sim).unwrap();
    let samples = training_samples(&ds.records).unwrap();
    let forest = fit_forest(&samples, &Hyperparams::default(), 8).unwrap();
    let pred: Vec<Vec<f64>> = (0..samples.len())
        .map(|i| forest.predict(samples.features(i)).unwrap())
        .collect();
    let actual: Vec<Vec<f64>> = (0..samples.len())
        .map(|i| samples.target(i).to_vec())
        .collect();
    assert!(score_outputs(&pred, &actual).unwrap()[1].r2.unwrap() > 0.95);

    let constraints = derive_default_constraints(&ds.records, 1.5).unwrap();
    let config = ManagerConfig::for_model(&forest, constraints, 8);
    let backend = Simulator::new([model.clone()], CostModel::default(), 9).unwrap();
    let mgr = Manager::new("pyaes", forest, config, backend, CostModel::default()).unwrap();
    for v in [2010.0, 5010.0, 8010.0] {
        let pay = PayloadVector::new(vec![v, v]).unwrap();
        let (m, _, fallback, _) = mgr.decide(&pay).unwrap();
        if !fallback {
            assert!(
                m.as_f64() >= required_memory(&model, &pay).unwrap(),
                "{m} below the floor for {v}"
            );
        }
    }
}
