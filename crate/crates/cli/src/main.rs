//! `memfigless`: profile, train, run, compare and report.
//!
//! Every flag can also be set through `MEMFIGLESS_<FLAG>` (upper case,
//! dashes as underscores). Errors exit with status 2.

mod stream;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use memfigless_core::experiment::{self, Totals};
use memfigless_core::forest::{
    load_model, save_model, score_outputs, tune_with_holdout, OutputScore, TrainReport,
};
use memfigless_core::profiler::{summarize, training_samples, ProfileSummary, OUTPUT_NAMES};
use memfigless_core::sim::load_models;
use memfigless_core::{
    derive_default_constraints, fit_forest, presets, CostModel, Dataset, FunctionModel,
    Hyperparams, ParamGrid, ProfilePlan, RunContext, RunLog, SelectionPolicy, Simulator,
    SloConstraints, Strategy, Weights,
};

#[derive(Parser)]
#[command(
    name = "memfigless",
    version,
    about = "Input-aware memory configuration for serverless functions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep a profiling plan over the simulator and write a dataset.
    Profile(ProfileArgs),
    /// Tune and fit a forest on a dataset.
    Train(TrainArgs),
    /// Feed a payload stream through the model-driven manager.
    Run(RunArgs),
    /// Feed a payload stream through a named strategy.
    Baseline(BaselineArgs),
    /// Join run logs into comparison tables.
    Report(ReportArgs),
    /// Write a payload stream file.
    Stream(StreamArgs),
    /// Print the built-in function models as JSON.
    Presets,
}

#[derive(Args)]
struct BackendArgs {
    /// Function model name; defaults to the function named by the plan or dataset.
    #[arg(long, env = "MEMFIGLESS_PRESET")]
    preset: Option<String>,
    /// JSON file with function models to use instead of the built-in presets.
    #[arg(long, env = "MEMFIGLESS_MODELS")]
    models: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, env = "MEMFIGLESS_PLAN")]
    plan: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    /// Replaces the plan's seed.
    #[arg(long, env = "MEMFIGLESS_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "MEMFIGLESS_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "MEMFIGLESS_DATASET")]
    dataset: PathBuf,
    /// JSON hyperparameter grid; the default grid otherwise.
    #[arg(long, env = "MEMFIGLESS_GRID")]
    grid: Option<PathBuf>,
    #[arg(long, env = "MEMFIGLESS_FOLDS", default_value_t = 5)]
    folds: usize,
    /// Fraction of rows held out for scoring before the final refit.
    #[arg(long, env = "MEMFIGLESS_HOLDOUT", default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, env = "MEMFIGLESS_SEED", default_value_t = 0)]
    seed: u64,
    /// Model file.
    #[arg(long, env = "MEMFIGLESS_OUT")]
    out: PathBuf,
    /// Training report; `<out>.report.json` by default.
    #[arg(long, env = "MEMFIGLESS_REPORT")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ConstraintArgs {
    /// Profiling dataset the default deadline and budget are derived from.
    #[arg(long, env = "MEMFIGLESS_DATASET")]
    dataset: Option<PathBuf>,
    /// Multiplier on the dataset's mean duration and cost.
    #[arg(long, env = "MEMFIGLESS_SLACK", default_value_t = 1.5)]
    slack: f64,
    #[arg(long, env = "MEMFIGLESS_DEADLINE_MS")]
    deadline_ms: Option<f64>,
    #[arg(long, env = "MEMFIGLESS_BUDGET_USD")]
    budget_usd: Option<f64>,
    #[arg(long, env = "MEMFIGLESS_W_COST", default_value_t = 0.5)]
    w_cost: f64,
    #[arg(long, env = "MEMFIGLESS_W_TIME", default_value_t = 0.5)]
    w_time: f64,
    /// Safety margin on predicted memory use.
    #[arg(long, env = "MEMFIGLESS_HEADROOM", default_value_t = 0.05)]
    headroom: f64,
    /// Drop the memory headroom rule and filter on deadline, budget and success only.
    #[arg(long, env = "MEMFIGLESS_NO_HEADROOM")]
    no_headroom: bool,
}

#[derive(Args)]
struct StreamRunArgs {
    /// Payload stream file.
    #[arg(long, env = "MEMFIGLESS_STREAM")]
    stream: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    constraints: ConstraintArgs,
    #[arg(long, env = "MEMFIGLESS_MEM_STEP", default_value_t = 1)]
    mem_step: u32,
    #[arg(long, env = "MEMFIGLESS_SEED", default_value_t = 0)]
    seed: u64,
    /// Run log.
    #[arg(long, env = "MEMFIGLESS_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, env = "MEMFIGLESS_MODEL")]
    model: PathBuf,
    #[command(flatten)]
    run: StreamRunArgs,
}

#[derive(Args)]
struct BaselineArgs {
    /// static-max, static-default, exhaustive-oracle or memfigless.
    #[arg(long, env = "MEMFIGLESS_STRATEGY", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Needed by the memfigless strategy only.
    #[arg(long, env = "MEMFIGLESS_MODEL")]
    model: Option<PathBuf>,
    #[command(flatten)]
    run: StreamRunArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Run logs over the same payload stream.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Directory for summary.csv, detail.csv and report.txt.
    #[arg(long, env = "MEMFIGLESS_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    /// Use the payload grid of a profiling plan.
    #[arg(long, env = "MEMFIGLESS_PLAN", conflicts_with_all = ["min", "max", "count"])]
    plan: Option<PathBuf>,
    #[arg(long, required_unless_present = "plan")]
    min: Option<f64>,
    #[arg(long, required_unless_present = "plan")]
    max: Option<f64>,
    #[arg(long, required_unless_present = "plan")]
    count: Option<usize>,
    #[arg(long, default_value_t = 1)]
    dims: usize,
    /// Written to stdout when absent.
    #[arg(long, env = "MEMFIGLESS_OUT")]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
        .map_err(|e: experiment::ExperimentError| e.to_string())
}

/// Files and settings one command works from.
#[derive(Debug, Default)]
struct RunManifest {
    inputs: Vec<(&'static str, PathBuf)>,
}

impl RunManifest {
    fn with(mut self, what: &'static str, path: Option<&Path>) -> Self {
        if let Some(p) = path {
            self.inputs.push((what, p.to_path_buf()));
        }
        self
    }

    /// Every referenced input exists before any work starts.
    fn check(&self) -> Result<()> {
        for (what, p) in &self.inputs {
            if !p.exists() {
                bail!("{what} file `{}` does not exist", p.display());
            }
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading `{}`", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing `{}`", path.display()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).with_context(|| format!("opening `{}`", path.display()))?;
    Dataset::read(BufReader::new(f))
        .with_context(|| format!("reading dataset `{}`", path.display()))
}

fn resolve_model(backend: &BackendArgs, fallback: Option<&str>) -> Result<FunctionModel> {
    let models = match &backend.models {
        Some(p) => {
            load_models(&read_text(p)?).with_context(|| format!("models file `{}`", p.display()))?
        }
        None => presets(),
    };
    let Some(name) = backend.preset.as_deref().or(fallback) else {
        bail!("no function model named; pass --preset");
    };
    models
        .into_iter()
        .find(|m| m.name == name)
        .with_context(|| format!("unknown function model `{name}`"))
}

fn profile(a: ProfileArgs) -> Result<()> {
    RunManifest::default()
        .with("plan", Some(&a.plan))
        .with("models", a.backend.models.as_deref())
        .check()?;
    let mut plan = ProfilePlan::from_json(&read_text(&a.plan)?)
        .with_context(|| format!("plan `{}`", a.plan.display()))?;
    if let Some(seed) = a.seed {
        plan.seed = seed;
    }
    let model = resolve_model(&a.backend, Some(&plan.function))?;
    if model.name != plan.function {
        bail!(
            "plan profiles `{}` but the backend model is `{}`",
            plan.function,
            model.name
        );
    }
    let mut sim = Simulator::new([model], CostModel::default(), plan.seed)?;
    let ds = memfigless_core::run_profile(&plan, &mut sim)?;
    let f = fs::File::create(&a.out).with_context(|| format!("creating `{}`", a.out.display()))?;
    let mut w = BufWriter::new(f);
    ds.write(&mut w)?;
    w.flush()?;
    print!("{}", summary_table(&summarize(&ds)?));
    Ok(())
}

fn summary_table(s: &ProfileSummary) -> String {
    let mut out = format!(
        "function {}: {} records, {} succeeded\n",
        s.function, s.records, s.successes
    );
    let d = s.billed_duration_ms;
    let c = s.cost_usd;
    let _ = writeln!(
        out,
        "billed duration ms  mean {:.1}  min {:.0}  max {:.0}",
        d.mean, d.min, d.max
    );
    let _ = writeln!(
        out,
        "cost usd            mean {:.9}  min {:.9}  max {:.9}",
        c.mean, c.min, c.max
    );
    let _ = writeln!(out, "{:>10} {:>8}", "memory_mb", "oom_%");
    for (m, r) in &s.oom_rate {
        let _ = writeln!(out, "{m:>10} {:>8.1}", 100.0 * r);
    }
    out
}

fn score_table(title: &str, scores: &[OutputScore]) -> String {
    let mut out = format!("{title}\n{:<16} {:>10} {:>14}\n", "output", "r2", "mae");
    for (name, s) in OUTPUT_NAMES.iter().zip(scores) {
        let r2 = s.r2.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "{name:<16} {r2:>10} {:>14.4}", s.mae);
    }
    out
}

fn train(a: TrainArgs) -> Result<()> {
    RunManifest::default()
        .with("dataset", Some(&a.dataset))
        .with("grid", a.grid.as_deref())
        .check()?;
    let ds = read_dataset(&a.dataset)?;
    let samples = training_samples(&ds.records)?;
    let grid = match &a.grid {
        Some(p) => serde_json::from_str::<ParamGrid>(&read_text(p)?)
            .with_context(|| format!("grid `{}`", p.display()))?,
        None => ParamGrid::default(),
    };
    let n = samples.len();
    let held = (n as f64 * a.holdout).round() as usize;
    let tuning_rows = if held < 2 { n } else { n - held };
    let (forest, report) = if tuning_rows < a.folds.max(2) {
        log::warn!(
            "{n} rows are too few for {}-fold tuning; fitting default hyperparameters untuned",
            a.folds
        );
        let params = Hyperparams::default();
        let forest = fit_forest(&samples.canonicalized(), &params, a.seed)?;
        (
            forest,
            TrainReport {
                chosen: params,
                k_folds: 0,
                n_samples: n,
                grid: Vec::new(),
                holdout: None,
            },
        )
    } else {
        let out = tune_with_holdout(&samples, &grid, a.folds, a.holdout, a.seed)?;
        (out.forest, out.report)
    };
    save_model(&forest, &a.out)?;
    let report_path = a
        .report
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", a.out.display())));
    write_text(
        &report_path,
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    println!("chosen: {:?}", report.chosen);
    match &report.holdout {
        Some(h) => print!("{}", score_table("held-out scores", h)),
        None if n < 2 => println!("too few rows to score"),
        None => {
            let pred = (0..n)
                .map(|i| forest.predict(samples.features(i)))
                .collect::<Result<Vec<_>, _>>()?;
            let actual: Vec<Vec<f64>> = (0..n).map(|i| samples.target(i).to_vec()).collect();
            print!(
                "{}",
                score_table("training-set scores", &score_outputs(&pred, &actual)?)
            );
        }
    }
    Ok(())
}

fn resolve_constraints(c: &ConstraintArgs) -> Result<SloConstraints> {
    let weights = Weights::new(c.w_cost, c.w_time)?;
    let (deadline, budget) = match &c.dataset {
        Some(p) => {
            let d = derive_default_constraints(&read_dataset(p)?.records, c.slack)?;
            (
                c.deadline_ms.unwrap_or(d.deadline_ms),
                c.budget_usd.unwrap_or(d.budget_usd),
            )
        }
        None => match (c.deadline_ms, c.budget_usd) {
            (Some(d), Some(b)) => (d, b),
            _ => bail!("pass --dataset, or both --deadline-ms and --budget-usd"),
        },
    };
    Ok(SloConstraints::new(deadline, budget, weights)?)
}

fn totals_line(label: &str, t: &Totals) -> String {
    format!(
        "{label}: {} invocations, {} MB allocated, {:.9} USD, SLO {:.1}%, deadline {:.1}%, fallback {:.1}%, failures {}\n",
        t.invocations,
        t.cumulative_memory_mb,
        t.cumulative_cost_usd,
        100.0 * t.slo_rate,
        100.0 * t.deadline_rate,
        100.0 * t.fallback_rate,
        t.failures
    )
}

fn run_strategy(strategy: Strategy, model: Option<&Path>, r: StreamRunArgs) -> Result<()> {
    RunManifest::default()
        .with("model", model)
        .with("stream", Some(&r.stream))
        .with("dataset", r.constraints.dataset.as_deref())
        .with("models", r.backend.models.as_deref())
        .check()?;
    let payloads = stream::parse(&read_text(&r.stream)?)
        .with_context(|| format!("stream `{}`", r.stream.display()))?;
    let constraints = resolve_constraints(&r.constraints)?;
    let dataset_fn = match &r.constraints.dataset {
        Some(p) => Some(read_dataset(p)?.function),
        None => None,
    };
    let fmodel = resolve_model(&r.backend, dataset_fn.as_deref())?;
    let forest = model.map(load_model).transpose()?;
    let policy = SelectionPolicy {
        memory_headroom: (!r.constraints.no_headroom).then_some(r.constraints.headroom),
        ..SelectionPolicy::default()
    };
    let ctx = RunContext {
        model: fmodel,
        forest,
        constraints,
        policy,
        mem_step: r.mem_step,
        seed: r.seed,
        cost_model: CostModel::default(),
    };
    let log = memfigless_core::run_stream(strategy, &ctx, &payloads)?;
    let f = fs::File::create(&r.out).with_context(|| format!("creating `{}`", r.out.display()))?;
    let mut w = BufWriter::new(f);
    log.write(&mut w)?;
    writeln!(w)?;
    w.flush()?;
    print!("{}", totals_line(strategy.name(), &log.totals));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut manifest = RunManifest::default();
    for l in &a.logs {
        manifest = manifest.with("log", Some(l));
    }
    manifest.check()?;
    let logs = a
        .logs
        .iter()
        .map(|p| {
            RunLog::from_json(&read_text(p)?).with_context(|| format!("log `{}`", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = memfigless_core::report(&logs)?;
    let text = rep.to_text();
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating `{}`", dir.display()))?;
        write_text(&dir.join("summary.csv"), &rep.summary_csv())?;
        write_text(&dir.join("detail.csv"), &rep.detail_csv())?;
        write_text(&dir.join("report.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn make_stream(a: StreamArgs) -> Result<()> {
    let payloads = match &a.plan {
        Some(p) => {
            RunManifest::default().with("plan", Some(p)).check()?;
            ProfilePlan::from_json(&read_text(p)?)?
                .payload_grid
                .expand()?
        }
        None => match (a.min, a.max, a.count) {
            (Some(lo), Some(hi), Some(n)) => stream::linspace(lo, hi, n, a.dims)?,
            _ => bail!("pass --plan, or --min, --max and --count"),
        },
    };
    let text = stream::render(&payloads);
    match &a.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Profile(a) => profile(a),
        Command::Train(a) => train(a),
        Command::Run(a) => run_strategy(Strategy::Memfigless, Some(&a.model), a.run),
        Command::Baseline(a) => run_strategy(a.strategy, a.model.as_deref(), a.run),
        Command::Report(a) => report(a),
        Command::Stream(a) => make_stream(a),
        Command::Presets => {
            println!("{}", serde_json::to_string_pretty(&presets())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
