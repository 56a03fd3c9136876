use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memfigless"))
        .args(args)
        .current_dir(dir)
        .env_remove("MEMFIGLESS_OUT")
        .env_remove("MEMFIGLESS_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

const PLAN: &str = r#"{"function": "graph-bfs",
    "payload_grid": [{"min": 10, "max": 4010, "step": 1000}],
    "memory_grid": {"min": 128, "max": 3008, "step": 256}, "iterations": 2, "seed": 3}"#;

#[test]
fn missing_plan_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(
        dir.path(),
        &["profile", "--plan", "nowhere.json", "--out", "d.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.json"));
}

#[test]
fn profile_counts_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "plan.json", PLAN);
    let summary = ok(d, &["profile", "--plan", "plan.json", "--out", "a.jsonl"]);
    assert!(summary.contains("120 records"), "{summary}");
    ok(d, &["profile", "--plan", "plan.json", "--out", "b.jsonl"]);
    assert_eq!(
        std::fs::read(d.join("a.jsonl")).unwrap(),
        std::fs::read(d.join("b.jsonl")).unwrap()
    );
    ok(
        d,
        &[
            "profile",
            "--plan",
            "plan.json",
            "--seed",
            "4",
            "--out",
            "c.jsonl",
        ],
    );
    assert_ne!(
        std::fs::read(d.join("a.jsonl")).unwrap(),
        std::fs::read(d.join("c.jsonl")).unwrap()
    );
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "plan.json", PLAN);
    ok(
        d,
        &[
            "profile",
            "--plan",
            "plan.json",
            "--seed",
            "4",
            "--out",
            "flag.jsonl",
        ],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_memfigless"))
        .args(["profile", "--plan", "plan.json"])
        .current_dir(d)
        .env("MEMFIGLESS_SEED", "4")
        .env("MEMFIGLESS_OUT", "env.jsonl")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(d.join("flag.jsonl")).unwrap(),
        std::fs::read(d.join("env.jsonl")).unwrap()
    );
}

#[test]
fn one_row_dataset_trains_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "plan.json",
        r#"{"function": "graph-bfs", "payload_grid": [[500]],
            "memory_grid": {"min": 1024, "max": 1024, "step": 128}, "iterations": 1}"#,
    );
    ok(d, &["profile", "--plan", "plan.json", "--out", "one.jsonl"]);
    let out = bin(d, &["train", "--dataset", "one.jsonl", "--out", "m.json"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("too few"));
    assert_eq!(json(d, "m.json.report.json")["k_folds"], 0);
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "empty.jsonl",
        "{\"function\":\"graph-bfs\",\"provenance\":\"x\",\"records\":0}\n",
    );
    assert_eq!(
        bin(d, &["train", "--dataset", "empty.jsonl", "--out", "m.json"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn baselines_reports_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "plan.json", PLAN);
    ok(d, &["profile", "--plan", "plan.json", "--out", "ds.jsonl"]);
    ok(
        d,
        &[
            "stream", "--min", "100", "--max", "3000", "--count", "7", "--out", "s.txt",
        ],
    );
    let common = [
        "--stream",
        "s.txt",
        "--dataset",
        "ds.jsonl",
        "--w-cost",
        "0.3",
        "--w-time",
        "0.7",
    ];

    let out = ok(
        d,
        &[
            &["baseline", "--strategy", "static-max", "--out", "max.json"][..],
            &common,
        ]
        .concat(),
    );
    assert!(out.contains("7 invocations, 21056 MB"), "{out}");
    assert_eq!(
        json(d, "max.json")["totals"]["cumulative_memory_mb"],
        3008 * 7
    );
    assert_eq!(
        json(d, "max.json")["header"]["constraints"]["weights"]["time"],
        0.7
    );
    ok(
        d,
        &[
            &[
                "baseline",
                "--strategy",
                "static-default",
                "--out",
                "min.json",
            ][..],
            &common,
        ]
        .concat(),
    );

    // Two logs: savings are 1 - a/b on cumulative memory.
    ok(d, &["report", "min.json", "max.json", "--out", "rep"]);
    let summary = std::fs::read_to_string(d.join("rep/summary.csv")).unwrap();
    let expected = 100.0 * (1.0 - 128.0 / 3008.0);
    assert!(
        summary
            .lines()
            .nth(1)
            .unwrap()
            .contains(&format!(",{expected:.2},")),
        "{summary}"
    );
    assert_eq!(
        std::fs::read_to_string(d.join("rep/detail.csv"))
            .unwrap()
            .lines()
            .count(),
        8
    );

    // Single log: one row, empty savings columns.
    ok(d, &["report", "max.json", "--out", "one"]);
    let one = std::fs::read_to_string(d.join("one/summary.csv")).unwrap();
    assert_eq!(one.lines().count(), 2);
    assert!(one.lines().nth(1).unwrap().ends_with(",,"));

    // A different stream cannot be joined.
    ok(
        d,
        &[
            "stream", "--min", "100", "--max", "3000", "--count", "6", "--out", "s6.txt",
        ],
    );
    ok(
        d,
        &[
            "baseline",
            "--strategy",
            "static-max",
            "--stream",
            "s6.txt",
            "--dataset",
            "ds.jsonl",
            "--out",
            "six.json",
        ],
    );
    assert_eq!(
        bin(d, &["report", "max.json", "six.json"]).status.code(),
        Some(2)
    );

    assert_eq!(
        bin(
            d,
            &[
                &["baseline", "--strategy", "bogus", "--out", "x.json"][..],
                &common
            ]
            .concat()
        )
        .status
        .code(),
        Some(2)
    );
    let no_model = bin(
        d,
        &[
            &["baseline", "--strategy", "memfigless", "--out", "x.json"][..],
            &common,
        ]
        .concat(),
    );
    assert_eq!(no_model.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_model.stderr).contains("model"));
}

#[test]
fn run_handles_empty_and_full_streams() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "plan.json", PLAN);
    write(
        d,
        "grid.json",
        r#"{"n_estimators": [20], "max_depth": [null], "min_samples_split": [2], "min_samples_leaf": [1]}"#,
    );
    ok(d, &["profile", "--plan", "plan.json", "--out", "ds.jsonl"]);
    ok(
        d,
        &[
            "train",
            "--dataset",
            "ds.jsonl",
            "--grid",
            "grid.json",
            "--out",
            "m.json",
        ],
    );
    write(d, "empty.txt", "# nothing\n");
    let out = ok(
        d,
        &[
            "run",
            "--model",
            "m.json",
            "--stream",
            "empty.txt",
            "--dataset",
            "ds.jsonl",
            "--out",
            "e.json",
        ],
    );
    assert!(out.contains("0 invocations, 0 MB"), "{out}");

    ok(
        d,
        &[
            "stream", "--min", "10", "--max", "4010", "--count", "50", "--out", "s.txt",
        ],
    );
    let out = ok(
        d,
        &[
            "run",
            "--model",
            "m.json",
            "--stream",
            "s.txt",
            "--dataset",
            "ds.jsonl",
            "--out",
            "r.json",
        ],
    );
    assert!(out.contains("50 invocations"), "{out}");
    let log = json(d, "r.json");
    assert_eq!(log["entries"].as_array().unwrap().len(), 50);
    assert!(log["entries"][0]["selection"]["pareto_front"].is_array());

    let missing = bin(
        d,
        &[
            "run",
            "--model",
            "absent.json",
            "--stream",
            "s.txt",
            "--dataset",
            "ds.jsonl",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(missing.status.code(), Some(2));
}
