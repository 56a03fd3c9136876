//! Shared record schema, billing model and SLO constraints.
//!
//! Records are persisted one JSON object per line. Deserialization goes through
//! [`validate_record`], so every record read from disk has its derived fields
//! (`memory_utilisation`, `billed_gb_s`) recomputed from the primary ones.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest memory configuration a function may be given.
pub const MIN_MEMORY_MB: u32 = 128;
/// Largest memory configuration a function may be given.
pub const MAX_MEMORY_MB: u32 = 3008;

const DERIVED_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("memory {value} MB outside [{min}, {max}]")]
    MemoryOutOfRange { value: u32, min: u32, max: u32 },
    #[error("dataset has no successful records")]
    EmptyDataset,
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error("record line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for DomainError {
    fn from(e: std::io::Error) -> Self {
        DomainError::Io(e.to_string())
    }
}

/// Function input parameters, e.g. `[n]` for a matrix size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PayloadVector(Vec<f64>);

impl PayloadVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DomainError> {
        if values.is_empty() {
            return Err(DomainError::Schema(
                "payload must have at least one component".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(DomainError::Schema(format!(
                "payload component {v} is not a finite non-negative number"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for PayloadVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join(";"))
    }
}

/// Allocated memory in whole megabytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemoryMb(u32);

impl MemoryMb {
    pub const MIN: MemoryMb = MemoryMb(MIN_MEMORY_MB);
    pub const MAX: MemoryMb = MemoryMb(MAX_MEMORY_MB);

    pub fn new(value: u32) -> Result<Self, DomainError> {
        Self::within(value, MemoryRange::default())
    }

    pub fn within(value: u32, range: MemoryRange) -> Result<Self, DomainError> {
        if value < range.min.0 || value > range.max.0 {
            return Err(DomainError::MemoryOutOfRange {
                value,
                min: range.min.0,
                max: range.max.0,
            });
        }
        Ok(Self(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

impl fmt::Display for MemoryMb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} MB", self.0)
    }
}

/// Closed interval of admissible memory sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRange {
    pub min: MemoryMb,
    pub max: MemoryMb,
}

impl Default for MemoryRange {
    fn default() -> Self {
        Self {
            min: MemoryMb::MIN,
            max: MemoryMb::MAX,
        }
    }
}

impl MemoryRange {
    pub fn contains(&self, m: u32) -> bool {
        (self.min.0..=self.max.0).contains(&m)
    }

    /// Grid `min, min+step, ...` up to and including `max` when it lands on the grid.
    pub fn grid(&self, step: u32) -> Vec<MemoryMb> {
        let step = step.max(1);
        (self.min.0..=self.max.0)
            .step_by(step as usize)
            .map(MemoryMb)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionError {
    None,
    Oom,
    Timeout,
}

impl FunctionError {
    pub fn is_success(self) -> bool {
        self == FunctionError::None
    }
}

/// One function execution, field names as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord")]
pub struct InvocationRecord {
    pub request_id: String,
    pub payload: PayloadVector,
    pub memory_size: MemoryMb,
    pub memory_used: f64,
    pub memory_utilisation: f64,
    pub billed_duration: u64,
    pub billed_gb_s: f64,
    pub cost_usd: f64,
    pub cold_start: bool,
    pub init_duration: f64,
    pub function_error: FunctionError,
    pub timestamp: u64,
}

impl InvocationRecord {
    pub fn succeeded(&self) -> bool {
        self.function_error.is_success()
    }
}

/// Unvalidated record as read from a file or produced by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub request_id: String,
    pub payload: Vec<f64>,
    pub memory_size: u32,
    pub memory_used: f64,
    #[serde(default)]
    pub memory_utilisation: Option<f64>,
    pub billed_duration: u64,
    #[serde(default)]
    pub billed_gb_s: Option<f64>,
    pub cost_usd: f64,
    pub cold_start: bool,
    pub init_duration: f64,
    pub function_error: FunctionError,
    pub timestamp: u64,
}

impl TryFrom<RawRecord> for InvocationRecord {
    type Error = DomainError;

    fn try_from(raw: RawRecord) -> Result<Self, Self::Error> {
        validate_record(raw)
    }
}

/// Enforces record invariants and recomputes the derived fields.
pub fn validate_record(raw: RawRecord) -> Result<InvocationRecord, DomainError> {
    let schema = |m: String| Err(DomainError::Schema(m));
    if raw.request_id.is_empty() {
        return schema("request_id is empty".into());
    }
    let payload = PayloadVector::new(raw.payload)?;
    let memory_size = MemoryMb::new(raw.memory_size)?;
    if !raw.memory_used.is_finite() || raw.memory_used < 0.0 {
        return schema(format!(
            "memory_used {} is not finite and non-negative",
            raw.memory_used
        ));
    }
    let utilisation = raw.memory_used / memory_size.as_f64();
    if utilisation > 1.0 && raw.function_error != FunctionError::Oom {
        return schema(format!(
            "memory_utilisation {utilisation} exceeds 1 without an oom error"
        ));
    }
    if let Some(u) = raw.memory_utilisation {
        if (u - utilisation).abs() > DERIVED_TOLERANCE {
            return schema(format!(
                "memory_utilisation {u} != memory_used/memory_size {utilisation}"
            ));
        }
    }
    let gb_s = gb_seconds(raw.billed_duration as f64, memory_size);
    if let Some(g) = raw.billed_gb_s {
        if (g - gb_s).abs() > DERIVED_TOLERANCE {
            return schema(format!(
                "billed_gb_s {g} != billed_duration x memory_size {gb_s}"
            ));
        }
    }
    if !raw.cost_usd.is_finite() || raw.cost_usd < 0.0 {
        return schema(format!(
            "cost_usd {} is not finite and non-negative",
            raw.cost_usd
        ));
    }
    if !raw.init_duration.is_finite() || raw.init_duration < 0.0 {
        return schema(format!(
            "init_duration {} is negative or not finite",
            raw.init_duration
        ));
    }
    if raw.cold_start != (raw.init_duration > 0.0) {
        return schema(format!(
            "init_duration {} inconsistent with cold_start={}",
            raw.init_duration, raw.cold_start
        ));
    }
    Ok(InvocationRecord {
        request_id: raw.request_id,
        payload,
        memory_size,
        memory_used: raw.memory_used,
        memory_utilisation: utilisation,
        billed_duration: raw.billed_duration,
        billed_gb_s: gb_s,
        cost_usd: raw.cost_usd,
        cold_start: raw.cold_start,
        init_duration: raw.init_duration,
        function_error: raw.function_error,
        timestamp: raw.timestamp,
    })
}

/// Provider price list. Both values are configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub price_per_gb_s: f64,
    pub beta: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            price_per_gb_s: 0.000_016_666_7,
            beta: 0.000_000_2,
        }
    }
}

impl CostModel {
    pub fn new(price_per_gb_s: f64, beta: f64) -> Result<Self, DomainError> {
        if !(price_per_gb_s >= 0.0 && beta >= 0.0)
            || !price_per_gb_s.is_finite()
            || !beta.is_finite()
        {
            return Err(DomainError::Schema(
                "prices must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            price_per_gb_s,
            beta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Charge {
    pub gb_s: f64,
    pub usd: f64,
}

fn gb_seconds(duration_ms: f64, memory: MemoryMb) -> f64 {
    duration_ms / 1000.0 * (memory.as_f64() / 1024.0)
}

/// Cost of one execution: GB-seconds times price, plus the per-invocation constant.
///
/// `duration_ms` is the billed duration for real executions and the predicted
/// duration when pricing candidates.
pub fn compute_cost(duration_ms: f64, memory: MemoryMb, model: &CostModel) -> Charge {
    debug_assert!(duration_ms >= 0.0);
    let gb_s = gb_seconds(duration_ms, memory);
    Charge {
        gb_s,
        usd: gb_s * model.price_per_gb_s + model.beta,
    }
}

/// Relative importance of the cost and time objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub cost: f64,
    pub time: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            cost: 0.5,
            time: 0.5,
        }
    }
}

impl Weights {
    pub fn new(cost: f64, time: f64) -> Result<Self, DomainError> {
        if !(cost >= 0.0 && time >= 0.0) || ((cost + time) - 1.0).abs() > 1e-9 {
            return Err(DomainError::InvalidConstraints(format!(
                "weights ({cost}, {time}) must be non-negative and sum to 1"
            )));
        }
        Ok(Self { cost, time })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloConstraints {
    pub deadline_ms: f64,
    pub budget_usd: f64,
    pub weights: Weights,
}

impl SloConstraints {
    pub fn new(deadline_ms: f64, budget_usd: f64, weights: Weights) -> Result<Self, DomainError> {
        if !(deadline_ms > 0.0) || !(budget_usd > 0.0) {
            return Err(DomainError::InvalidConstraints(format!(
                "deadline {deadline_ms} ms and budget {budget_usd} USD must be positive"
            )));
        }
        Weights::new(weights.cost, weights.time)?;
        Ok(Self {
            deadline_ms,
            budget_usd,
            weights,
        })
    }

    /// Constraints that never bind.
    pub fn unbounded(weights: Weights) -> Self {
        Self {
            deadline_ms: f64::INFINITY,
            budget_usd: f64::INFINITY,
            weights,
        }
    }
}

/// Deadline and budget as `slack` times the mean duration and cost of successful runs.
pub fn derive_default_constraints(
    records: &[InvocationRecord],
    slack: f64,
) -> Result<SloConstraints, DomainError> {
    let ok: Vec<&InvocationRecord> = records.iter().filter(|r| r.succeeded()).collect();
    if ok.is_empty() {
        return Err(DomainError::EmptyDataset);
    }
    let n = ok.len() as f64;
    let mean_duration = ok.iter().map(|r| r.billed_duration as f64).sum::<f64>() / n;
    let mean_cost = ok.iter().map(|r| r.cost_usd).sum::<f64>() / n;
    SloConstraints::new(slack * mean_duration, slack * mean_cost, Weights::default())
}

pub fn write_records<W: Write>(mut w: W, records: &[InvocationRecord]) -> Result<(), DomainError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DomainError::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads line-delimited records, skipping blank lines. `first_line` is the
/// 1-based line number of the first line in `r`, used in error messages.
pub fn read_records<R: BufRead>(
    r: R,
    first_line: usize,
) -> Result<Vec<InvocationRecord>, DomainError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InvocationRecord =
            serde_json::from_str(&line).map_err(|e| DomainError::Parse {
                line: first_line + i,
                message: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

/// Comma-separated export with a header row; payload components are joined by `;`.
pub fn write_records_csv<W: Write>(w: W, records: &[InvocationRecord]) -> Result<(), DomainError> {
    let mut csv = csv::Writer::from_writer(w);
    let io = |e: csv::Error| DomainError::Io(e.to_string());
    csv.write_record([
        "request_id",
        "payload",
        "memory_size",
        "memory_used",
        "memory_utilisation",
        "billed_duration",
        "billed_gb_s",
        "cost_usd",
        "cold_start",
        "init_duration",
        "function_error",
        "timestamp",
    ])
    .map_err(io)?;
    for r in records {
        let error = match r.function_error {
            FunctionError::None => "none",
            FunctionError::Oom => "oom",
            FunctionError::Timeout => "timeout",
        };
        csv.write_record([
            r.request_id.clone(),
            r.payload.to_string(),
            r.memory_size.get().to_string(),
            r.memory_used.to_string(),
            r.memory_utilisation.to_string(),
            r.billed_duration.to_string(),
            r.billed_gb_s.to_string(),
            r.cost_usd.to_string(),
            r.cold_start.to_string(),
            r.init_duration.to_string(),
            error.to_string(),
            r.timestamp.to_string(),
        ])
        .map_err(io)?;
    }
    csv.flush()?;
    Ok(())
}
