//! Offline profiling: sweep payloads x memory sizes x iterations against a
//! backend and keep every record, failures included.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    derive_default_constraints, DomainError, InvocationRecord, MemoryMb, PayloadVector,
    SloConstraints, MAX_MEMORY_MB, MIN_MEMORY_MB,
};
use crate::forest::{ForestError, Samples};
use crate::sim::{Backend, SimError};

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("empty grid: {0}")]
    EmptyGrid(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("dataset header: {0}")]
    Header(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Inclusive arithmetic range `min, min + step, ... <= max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Range {
    fn validate(&self, what: &str) -> Result<(), ProfileError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.step.is_finite()) {
            return Err(ProfileError::InvalidPlan(format!(
                "{what}: bounds must be finite"
            )));
        }
        if self.step <= 0.0 {
            return Err(ProfileError::InvalidPlan(format!(
                "{what}: step must be positive"
            )));
        }
        if self.min > self.max {
            return Err(ProfileError::EmptyGrid(format!(
                "{what}: min {} > max {}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.min + i as f64 * self.step).collect()
    }
}

/// Payload grid: an explicit list, or one range per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PayloadGrid {
    Values(Vec<PayloadVector>),
    Ranges(Vec<Range>),
}

impl PayloadGrid {
    pub fn dims(&self) -> Option<usize> {
        match self {
            PayloadGrid::Values(v) => v.first().map(PayloadVector::dims),
            PayloadGrid::Ranges(r) => (!r.is_empty()).then_some(r.len()),
        }
    }

    /// Payload points; ranges expand with the first dimension varying slowest.
    pub fn expand(&self) -> Result<Vec<PayloadVector>, ProfileError> {
        let points = match self {
            PayloadGrid::Values(v) => {
                if let Some(p) = v.iter().find(|p| p.dims() != v[0].dims()) {
                    return Err(ProfileError::InvalidPlan(format!(
                        "payload {p} has {} dimensions, expected {}",
                        p.dims(),
                        v[0].dims()
                    )));
                }
                v.clone()
            }
            PayloadGrid::Ranges(ranges) => {
                let mut acc: Vec<Vec<f64>> = vec![Vec::new()];
                for (d, r) in ranges.iter().enumerate() {
                    r.validate(&format!("payload dimension {d}"))?;
                    let vals = r.values();
                    acc = acc
                        .into_iter()
                        .flat_map(|prefix| {
                            vals.iter().map(move |v| {
                                let mut p = prefix.clone();
                                p.push(*v);
                                p
                            })
                        })
                        .collect();
                }
                if ranges.is_empty() {
                    acc.clear();
                }
                acc.into_iter()
                    .map(PayloadVector::new)
                    .collect::<Result<_, _>>()?
            }
        };
        if points.is_empty() {
            return Err(ProfileError::EmptyGrid("payload grid".into()));
        }
        Ok(points)
    }
}

fn default_memory_grid() -> Range {
    Range {
        min: MIN_MEMORY_MB as f64,
        max: MAX_MEMORY_MB as f64,
        step: 128.0,
    }
}

fn default_iterations() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilePlan {
    pub function: String,
    pub payload_grid: PayloadGrid,
    #[serde(default = "default_memory_grid")]
    pub memory_grid: Range,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default)]
    pub seed: u64,
}

impl ProfilePlan {
    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        serde_json::from_str(text).map_err(|e| ProfileError::InvalidPlan(e.to_string()))
    }

    /// SHA-256 of the plan's canonical JSON, hex encoded.
    pub fn provenance(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn memories(&self) -> Result<Vec<MemoryMb>, ProfileError> {
        let g = self.memory_grid;
        g.validate("memory grid")?;
        g.values()
            .into_iter()
            .map(|m| {
                if m.fract() != 0.0 {
                    return Err(ProfileError::InvalidPlan(format!(
                        "memory {m} MB is not a whole number"
                    )));
                }
                Ok(MemoryMb::new(m as u32)?)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub payload: PayloadVector,
    pub memory: MemoryMb,
    pub iteration: u32,
}

/// Payload-major product of the grids, each cell repeated `iterations` times.
pub fn expand_plan(plan: &ProfilePlan) -> Result<Vec<Cell>, ProfileError> {
    if plan.function.is_empty() {
        return Err(ProfileError::InvalidPlan("function name is empty".into()));
    }
    if plan.iterations == 0 {
        return Err(ProfileError::InvalidPlan(
            "iterations must be at least 1".into(),
        ));
    }
    let payloads = plan.payload_grid.expand()?;
    let memories = plan.memories()?;
    let mut cells = Vec::with_capacity(payloads.len() * memories.len() * plan.iterations as usize);
    for p in &payloads {
        for &m in &memories {
            for iteration in 0..plan.iterations {
                cells.push(Cell {
                    payload: p.clone(),
                    memory: m,
                    iteration,
                });
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub function: String,
    pub provenance: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub function: String,
    pub provenance: String,
    pub records: Vec<InvocationRecord>,
}

impl Dataset {
    pub fn payload_dims(&self) -> Option<usize> {
        self.records.first().map(|r| r.payload.dims())
    }

    /// Header line followed by one record per line.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ProfileError> {
        let header = DatasetHeader {
            function: self.function.clone(),
            provenance: self.provenance.clone(),
            records: self.records.len(),
        };
        let line =
            serde_json::to_string(&header).map_err(|e| ProfileError::Header(e.to_string()))?;
        writeln!(w, "{line}").map_err(DomainError::from)?;
        crate::domain::write_records(w, &self.records)?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, ProfileError> {
        let mut first = String::new();
        r.read_line(&mut first).map_err(DomainError::from)?;
        let header: DatasetHeader =
            serde_json::from_str(first.trim()).map_err(|e| ProfileError::Header(e.to_string()))?;
        let records = crate::domain::read_records(r, 2)?;
        if records.len() != header.records {
            return Err(ProfileError::Header(format!(
                "header announces {} records, found {}",
                header.records,
                records.len()
            )));
        }
        let ds = Dataset {
            function: header.function,
            provenance: header.provenance,
            records,
        };
        ds.check_dims()?;
        Ok(ds)
    }

    fn check_dims(&self) -> Result<(), ProfileError> {
        if let Some(d) = self.payload_dims() {
            if let Some(r) = self.records.iter().find(|r| r.payload.dims() != d) {
                return Err(ProfileError::InvalidPlan(format!(
                    "record {} has {} payload dimensions, expected {d}",
                    r.request_id,
                    r.payload.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Runs every cell of the plan in [`expand_plan`] order.
///
/// OOM and timeout outcomes come back as records and are kept; only errors
/// that make the whole plan unusable (unknown function, wrong payload shape)
/// stop the sweep, and those are checked before the first invocation.
pub fn run_profile<B: Backend>(
    plan: &ProfilePlan,
    backend: &mut B,
) -> Result<Dataset, ProfileError> {
    let cells = expand_plan(plan)?;
    let dims = backend
        .payload_dims(&plan.function)
        .ok_or_else(|| SimError::UnknownFunction(plan.function.clone()))?;
    let got = cells[0].payload.dims();
    if got != dims {
        return Err(SimError::DimensionMismatch {
            function: plan.function.clone(),
            expected: dims,
            got,
        }
        .into());
    }
    let mut records = Vec::with_capacity(cells.len());
    for c in &cells {
        records.push(backend.invoke(&plan.function, &c.payload, c.memory)?);
    }
    log::info!(
        "profiled {} with {} invocations",
        plan.function,
        records.len()
    );
    Ok(Dataset {
        function: plan.function.clone(),
        provenance: plan.provenance(),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        (n > 0).then(|| Stats {
            mean: sum / n as f64,
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub function: String,
    pub records: usize,
    pub successes: usize,
    /// Over successful records only.
    pub billed_duration_ms: Stats,
    pub cost_usd: Stats,
    /// `(memory MB, fraction of records that ran out of memory)`, ascending.
    pub oom_rate: Vec<(u32, f64)>,
}

pub fn summarize(dataset: &Dataset) -> Result<ProfileSummary, ProfileError> {
    let ok: Vec<&InvocationRecord> = dataset.records.iter().filter(|r| r.succeeded()).collect();
    let empty = || ProfileError::Domain(DomainError::EmptyDataset);
    let billed = Stats::of(ok.iter().map(|r| r.billed_duration as f64)).ok_or_else(empty)?;
    let cost = Stats::of(ok.iter().map(|r| r.cost_usd)).ok_or_else(empty)?;
    let mut per_mem: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in &dataset.records {
        let e = per_mem.entry(r.memory_size.get()).or_default();
        e.0 += 1;
        if r.function_error == crate::domain::FunctionError::Oom {
            e.1 += 1;
        }
    }
    Ok(ProfileSummary {
        function: dataset.function.clone(),
        records: dataset.records.len(),
        successes: ok.len(),
        billed_duration_ms: billed,
        cost_usd: cost,
        oom_rate: per_mem
            .into_iter()
            .map(|(m, (n, oom))| (m, oom as f64 / n as f64))
            .collect(),
    })
}

/// Default deadline and budget for a dataset, `slack` times the successful means.
pub fn default_constraints(dataset: &Dataset, slack: f64) -> Result<SloConstraints, ProfileError> {
    Ok(derive_default_constraints(&dataset.records, slack)?)
}

/// Number of model outputs: billed duration, memory used, success.
pub const N_OUTPUTS: usize = 3;
pub const OUTPUT_NAMES: [&str; N_OUTPUTS] = ["billed_duration", "memory_used", "success"];

/// Model inputs for one configuration: `[memory, payload...]`.
pub fn features(memory: MemoryMb, payload: &PayloadVector) -> Vec<f64> {
    let mut x = Vec::with_capacity(1 + payload.dims());
    x.push(memory.as_f64());
    x.extend_from_slice(payload.values());
    x
}

/// Training rows from records; failures keep their labels.
pub fn training_samples(records: &[InvocationRecord]) -> Result<Samples, ProfileError> {
    let first = records
        .first()
        .ok_or(ProfileError::Domain(DomainError::EmptyDataset))?;
    let mut s = Samples::new(1 + first.payload.dims(), N_OUTPUTS);
    for r in records {
        let success = if r.succeeded() { 1.0 } else { 0.0 };
        s.push(
            &features(r.memory_size, &r.payload),
            &[r.billed_duration as f64, r.memory_used, success],
        )?;
    }
    Ok(s)
}
