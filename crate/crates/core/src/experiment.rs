//! Strategy runs over a payload stream and side-by-side reports.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    CostModel, InvocationRecord, MemoryMb, MemoryRange, PayloadVector, SloConstraints,
};
use crate::forest::Forest;
use crate::manager::{Manager, ManagerConfig, ManagerError, WindowScore};
use crate::optimizer::{SelectionPolicy, SelectionResult};
use crate::sim::{
    meets_deadline_noise_free, optimal_config_oracle, Backend, FunctionModel, SimError, Simulator,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("strategy `memfigless` needs a trained model")]
    ModelMissing,
    #[error("logs cover different payload streams: {0}")]
    MismatchedStreams(String),
    #[error("no logs to report")]
    NoLogs,
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Always the largest configuration.
    StaticMax,
    /// Always the smallest configuration.
    StaticDefault,
    /// Ground-truth optimum from the simulator's curves.
    ExhaustiveOracle,
    /// Model-driven selection through the manager.
    Memfigless,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::StaticMax,
        Strategy::StaticDefault,
        Strategy::ExhaustiveOracle,
        Strategy::Memfigless,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::StaticMax => "static-max",
            Strategy::StaticDefault => "static-default",
            Strategy::ExhaustiveOracle => "exhaustive-oracle",
            Strategy::Memfigless => "memfigless",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| ExperimentError::UnknownStrategy(s.to_string()))
    }
}

/// Everything a run needs besides the stream.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub model: FunctionModel,
    pub forest: Option<Forest>,
    pub constraints: SloConstraints,
    pub policy: SelectionPolicy,
    pub mem_step: u32,
    pub seed: u64,
    pub cost_model: CostModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub function: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub constraints: SloConstraints,
    pub mem_step: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: usize,
    pub payload: PayloadVector,
    pub memory: MemoryMb,
    pub fallback: bool,
    /// Ground-truth execution at this memory would succeed within the deadline.
    pub deadline_met: bool,
    /// The observed record succeeded within deadline and budget.
    pub slo_met: bool,
    /// Front, scores and rejection counts behind the choice, when the model ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionResult>,
    pub record: InvocationRecord,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub invocations: usize,
    pub cumulative_memory_mb: u64,
    pub cumulative_cost_usd: f64,
    /// Fractions in [0, 1]; zero for an empty run.
    pub slo_rate: f64,
    pub deadline_rate: f64,
    pub fallback_rate: f64,
    pub failures: usize,
}

impl Totals {
    fn of(entries: &[LogEntry]) -> Self {
        let n = entries.len();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Totals {
            invocations: n,
            cumulative_memory_mb: entries.iter().map(|e| e.memory.get() as u64).sum(),
            cumulative_cost_usd: entries.iter().map(|e| e.record.cost_usd).sum(),
            slo_rate: frac(entries.iter().filter(|e| e.slo_met).count()),
            deadline_rate: frac(entries.iter().filter(|e| e.deadline_met).count()),
            fallback_rate: frac(entries.iter().filter(|e| e.fallback).count()),
            failures: entries.iter().filter(|e| !e.record.succeeded()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub header: RunHeader,
    pub entries: Vec<LogEntry>,
    pub totals: Totals,
    /// Model accuracy on each retraining window, before the refit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub window_scores: Vec<WindowScore>,
}

impl RunLog {
    pub fn write<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        serde_json::to_writer_pretty(w, self).map_err(|e| ExperimentError::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Io(e.to_string()))
    }
}

fn entry(
    ctx: &RunContext,
    index: usize,
    payload: &PayloadVector,
    memory: MemoryMb,
    fallback: bool,
    selection: Option<SelectionResult>,
    record: InvocationRecord,
) -> Result<LogEntry, ExperimentError> {
    let deadline_met =
        meets_deadline_noise_free(&ctx.model, payload, memory, ctx.constraints.deadline_ms)?;
    let slo_met = record.succeeded()
        && record.billed_duration as f64 <= ctx.constraints.deadline_ms
        && record.cost_usd <= ctx.constraints.budget_usd;
    Ok(LogEntry {
        index,
        payload: payload.clone(),
        memory,
        fallback,
        deadline_met,
        slo_met,
        selection,
        record,
    })
}

/// Runs `payloads` in order through one strategy on a fresh simulator seeded with `ctx.seed`.
pub fn run_stream(
    strategy: Strategy,
    ctx: &RunContext,
    payloads: &[PayloadVector],
) -> Result<RunLog, ExperimentError> {
    let mut sim = Simulator::new([ctx.model.clone()], ctx.cost_model, ctx.seed)?;
    let name = ctx.model.name.clone();
    let mut entries = Vec::with_capacity(payloads.len());
    let mut window_scores = Vec::new();
    match strategy {
        Strategy::Memfigless => {
            let forest = ctx.forest.clone().ok_or(ExperimentError::ModelMissing)?;
            let config = ManagerConfig {
                policy: ctx.policy,
                mem_step: ctx.mem_step,
                ..ManagerConfig::for_model(&forest, ctx.constraints, ctx.seed)
            };
            let mut mgr = Manager::new(name.clone(), forest, config, sim, ctx.cost_model)?;
            for (i, p) in payloads.iter().enumerate() {
                let r = mgr.handle_invocation(p)?;
                entries.push(entry(
                    ctx,
                    i,
                    p,
                    r.memory,
                    r.fallback,
                    r.selection,
                    r.record,
                )?);
            }
            window_scores = mgr.window_scores().to_vec();
        }
        _ => {
            for (i, p) in payloads.iter().enumerate() {
                let (memory, fallback) = match strategy {
                    Strategy::StaticMax => (MemoryMb::MAX, false),
                    Strategy::StaticDefault => (MemoryMb::MIN, false),
                    _ => match optimal_config_oracle(
                        &ctx.model,
                        p,
                        &ctx.constraints,
                        ctx.mem_step,
                        MemoryRange::default(),
                        &ctx.cost_model,
                    )? {
                        Some(m) => (m, false),
                        None => (MemoryMb::MAX, true),
                    },
                };
                let record = sim.invoke(&name, p, memory)?;
                entries.push(entry(ctx, i, p, memory, fallback, None, record)?);
            }
        }
    }
    let totals = Totals::of(&entries);
    Ok(RunLog {
        header: RunHeader {
            function: name,
            strategy,
            seed: ctx.seed,
            constraints: ctx.constraints,
            mem_step: ctx.mem_step,
        },
        entries,
        totals,
        window_scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Savings {
    pub strategy: String,
    pub baseline: String,
    /// `100 * (1 - memory_A / memory_B)`.
    pub memory_pct: f64,
    pub cost_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub function: String,
    pub labels: Vec<String>,
    pub totals: Vec<Totals>,
    pub savings: Vec<Savings>,
    pub payloads: Vec<PayloadVector>,
    /// `memory[i][j]`: memory of log `j` for payload `i`.
    pub memory: Vec<Vec<u32>>,
    /// Per-log retraining window scores.
    pub window_scores: Vec<Vec<WindowScore>>,
}

fn savings_pct(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - a / b)
    }
}

/// Joins logs over the same stream. Labels are the strategy names, suffixed
/// with the position when a strategy appears twice.
pub fn report(logs: &[RunLog]) -> Result<Report, ExperimentError> {
    let first = logs.first().ok_or(ExperimentError::NoLogs)?;
    let stream: Vec<&PayloadVector> = first.entries.iter().map(|e| &e.payload).collect();
    for l in &logs[1..] {
        if l.header.function != first.header.function {
            return Err(ExperimentError::MismatchedStreams(format!(
                "functions `{}` and `{}`",
                first.header.function, l.header.function
            )));
        }
        let other: Vec<&PayloadVector> = l.entries.iter().map(|e| &e.payload).collect();
        if other != stream {
            return Err(ExperimentError::MismatchedStreams(format!(
                "`{}` and `{}` differ",
                first.header.strategy.name(),
                l.header.strategy.name()
            )));
        }
    }
    let labels: Vec<String> = logs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let name = l.header.strategy.name();
            if logs
                .iter()
                .filter(|o| o.header.strategy == l.header.strategy)
                .count()
                > 1
            {
                format!("{name}#{}", i + 1)
            } else {
                name.to_string()
            }
        })
        .collect();
    let mut savings = Vec::new();
    for (i, a) in logs.iter().enumerate() {
        for (j, b) in logs.iter().enumerate() {
            if i != j {
                savings.push(Savings {
                    strategy: labels[i].clone(),
                    baseline: labels[j].clone(),
                    memory_pct: savings_pct(
                        a.totals.cumulative_memory_mb as f64,
                        b.totals.cumulative_memory_mb as f64,
                    ),
                    cost_pct: savings_pct(
                        a.totals.cumulative_cost_usd,
                        b.totals.cumulative_cost_usd,
                    ),
                });
            }
        }
    }
    let memory = (0..stream.len())
        .map(|k| logs.iter().map(|l| l.entries[k].memory.get()).collect())
        .collect();
    Ok(Report {
        function: first.header.function.clone(),
        labels,
        totals: logs.iter().map(|l| l.totals).collect(),
        savings,
        payloads: stream.into_iter().cloned().collect(),
        memory,
        window_scores: logs.iter().map(|l| l.window_scores.clone()).collect(),
    })
}

impl Report {
    /// One row per strategy; savings columns name the baseline.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("strategy,invocations,cumulative_memory_mb,cumulative_cost_usd,slo_pct,deadline_pct,fallback_pct");
        for l in &self.labels {
            let _ = write!(out, ",memory_savings_vs_{l},cost_savings_vs_{l}");
        }
        out.push('\n');
        for (i, (label, t)) in self.labels.iter().zip(&self.totals).enumerate() {
            let _ = write!(
                out,
                "{label},{},{},{:.9},{:.2},{:.2},{:.2}",
                t.invocations,
                t.cumulative_memory_mb,
                t.cumulative_cost_usd,
                100.0 * t.slo_rate,
                100.0 * t.deadline_rate,
                100.0 * t.fallback_rate
            );
            for base in &self.labels {
                match self
                    .savings
                    .iter()
                    .find(|s| &s.strategy == label && &s.baseline == base)
                {
                    Some(s) if base != &self.labels[i] => {
                        let _ = write!(out, ",{:.2},{:.2}", s.memory_pct, s.cost_pct);
                    }
                    _ => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// One row per payload with the memory each strategy chose.
    pub fn detail_csv(&self) -> String {
        let mut out = String::from("index,payload");
        for l in &self.labels {
            let _ = write!(out, ",{l}_memory_mb");
        }
        out.push('\n');
        for (k, (p, row)) in self.payloads.iter().zip(&self.memory).enumerate() {
            let _ = write!(out, "{k},{p}");
            for m in row {
                let _ = write!(out, ",{m}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("function: {}\n\n", self.function);
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>14} {:>14} {:>8} {:>10} {:>10}",
            "strategy", "calls", "memory_mb", "cost_usd", "slo_%", "deadline_%", "fallback_%"
        );
        for (l, t) in self.labels.iter().zip(&self.totals) {
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>14} {:>14.9} {:>8.2} {:>10.2} {:>10.2}",
                l,
                t.invocations,
                t.cumulative_memory_mb,
                t.cumulative_cost_usd,
                100.0 * t.slo_rate,
                100.0 * t.deadline_rate,
                100.0 * t.fallback_rate
            );
        }
        if !self.savings.is_empty() {
            out.push_str("\nsavings (memory %, cost %)\n");
            for s in &self.savings {
                let _ = writeln!(
                    out,
                    "  {} vs {}: {:.2}, {:.2}",
                    s.strategy, s.baseline, s.memory_pct, s.cost_pct
                );
            }
        }
        if self.window_scores.iter().any(|w| !w.is_empty()) {
            out.push_str("\nwindow R² before refit (duration, memory, success)\n");
            let r2 = |s: &crate::forest::OutputScore| {
                s.r2.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
            };
            for (l, ws) in self.labels.iter().zip(&self.window_scores) {
                for w in ws {
                    let cols: Vec<String> = w.scores.iter().map(r2).collect();
                    let _ = writeln!(out, "  {l} @{}: {}", w.at_invocation, cols.join(", "));
                }
            }
        }
        out.push_str("\nper-payload memory (MB)\n");
        let _ = write!(out, "{:>6} {:>16}", "index", "payload");
        for l in &self.labels {
            let _ = write!(out, " {l:>18}");
        }
        out.push('\n');
        for (k, (p, row)) in self.payloads.iter().zip(&self.memory).enumerate() {
            let _ = write!(out, "{k:>6} {:>16}", p.to_string());
            for m in row {
                let _ = write!(out, " {m:>18}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Weights;
    use crate::sim::find_preset;

    fn ctx() -> RunContext {
        RunContext {
            model: find_preset("graph-bfs").unwrap(),
            forest: None,
            constraints: SloConstraints::new(2000.0, 1e-3, Weights::default()).unwrap(),
            policy: SelectionPolicy::default(),
            mem_step: 64,
            seed: 3,
            cost_model: CostModel::default(),
        }
    }

    fn stream(n: usize) -> Vec<PayloadVector> {
        (0..n)
            .map(|i| PayloadVector::new(vec![10.0 + 200.0 * i as f64]).unwrap())
            .collect()
    }

    #[test]
    fn static_max_memory_total() {
        let log = run_stream(Strategy::StaticMax, &ctx(), &stream(7)).unwrap();
        assert_eq!(log.totals.cumulative_memory_mb, 3008 * 7);
        assert_eq!(log.entries.len(), 7);
    }

    #[test]
    fn oracle_entries_match_oracle() {
        let c = ctx();
        let log = run_stream(Strategy::ExhaustiveOracle, &c, &stream(10)).unwrap();
        for e in &log.entries {
            let o = optimal_config_oracle(
                &c.model,
                &e.payload,
                &c.constraints,
                64,
                MemoryRange::default(),
                &c.cost_model,
            )
            .unwrap()
            .unwrap_or(MemoryMb::MAX);
            assert_eq!(e.memory, o);
            assert!(e.deadline_met || e.fallback);
        }
    }

    #[test]
    fn empty_stream_has_zero_totals() {
        let log = run_stream(Strategy::StaticDefault, &ctx(), &[]).unwrap();
        assert_eq!(log.totals, Totals::default());
    }

    #[test]
    fn memfigless_needs_model() {
        assert!(matches!(
            run_stream(Strategy::Memfigless, &ctx(), &stream(1)),
            Err(ExperimentError::ModelMissing)
        ));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("cose".parse::<Strategy>().is_err());
    }

    #[test]
    fn savings_arithmetic() {
        let c = ctx();
        let s = stream(10);
        let max = run_stream(Strategy::StaticMax, &c, &s).unwrap();
        let low = run_stream(Strategy::StaticDefault, &c, &s).unwrap();
        let r = report(&[low.clone(), max.clone()]).unwrap();
        let sv = &r.savings[0];
        assert_eq!(
            (sv.strategy.as_str(), sv.baseline.as_str()),
            ("static-default", "static-max")
        );
        assert!((sv.memory_pct - 100.0 * (1.0 - 1280.0 / 30080.0)).abs() < 1e-12);
        assert_eq!(r.memory.len(), 10);
        assert_eq!(r.detail_csv().lines().count(), 11);
        let single = report(std::slice::from_ref(&max)).unwrap();
        assert!(single.savings.is_empty());
        assert_eq!(
            single
                .summary_csv()
                .lines()
                .nth(1)
                .unwrap()
                .matches(",,")
                .count(),
            1
        );
        let text = r.to_text();
        assert!(text.contains("static-default vs static-max"));
    }

    #[test]
    fn mismatched_streams_rejected() {
        let c = ctx();
        let a = run_stream(Strategy::StaticMax, &c, &stream(3)).unwrap();
        let b = run_stream(Strategy::StaticMax, &c, &stream(4)).unwrap();
        assert!(matches!(
            report(&[a.clone(), b]),
            Err(ExperimentError::MismatchedStreams(_))
        ));
        let dup = report(&[a.clone(), a]).unwrap();
        assert_eq!(dup.labels, vec!["static-max#1", "static-max#2"]);
        assert!(matches!(report(&[]), Err(ExperimentError::NoLogs)));
    }

    #[test]
    fn log_round_trip() {
        let log = run_stream(Strategy::ExhaustiveOracle, &ctx(), &stream(4)).unwrap();
        let mut buf = Vec::new();
        log.write(&mut buf).unwrap();
        assert_eq!(
            RunLog::from_json(std::str::from_utf8(&buf).unwrap()).unwrap(),
            log
        );
    }
}
