//! Deterministic FaaS backend with parametric ground-truth performance curves.
//!
//! Each [`FunctionModel`] describes how much memory a payload needs and how long
//! it runs: duration scales linearly with allocated memory up to a speedup cap,
//! and an invocation below the payload's memory floor fails with OOM. Noise and
//! cold-start jitter come from a per-request ChaCha stream keyed by
//! `(seed, request counter)`, so replaying the same call sequence reproduces
//! every record bit for bit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    compute_cost, validate_record, CostModel, DomainError, FunctionError, InvocationRecord,
    MemoryMb, MemoryRange, PayloadVector, RawRecord, SloConstraints,
};

/// Billed time of an invocation killed for exceeding its memory.
pub const OOM_ABORT_MS: u64 = 10;
/// Default keep-alive of an idle instance, in invocation ticks.
pub const DEFAULT_KEEP_ALIVE: u64 = 100;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("payload has {got} dimensions, function `{function}` expects {expected}")]
    DimensionMismatch {
        function: String,
        expected: usize,
        got: usize,
    },
    #[error("memory {0} MB outside [128, 3008]")]
    MemoryOutOfRange(u32),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("invalid function model `{name}`: {reason}")]
    InvalidModel { name: String, reason: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// How a multi-dimensional payload collapses into one magnitude.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    #[default]
    GeometricMean,
    ArithmeticMean,
}

fn default_ref_memory() -> f64 {
    1769.0
}

fn default_noise() -> f64 {
    0.05
}

/// Ground-truth performance curves of one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionModel {
    pub name: String,
    pub payload_dims: usize,
    pub mem_base: f64,
    pub mem_per_unit: f64,
    pub mem_exp: f64,
    pub work_base: f64,
    pub work_exp: f64,
    #[serde(default = "default_ref_memory")]
    pub ref_memory: f64,
    pub max_speedup: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// `(mean, jitter)`: init duration is uniform in `mean ± jitter`.
    pub cold_start_ms: (f64, f64),
    pub timeout_ms: f64,
    #[serde(default)]
    pub magnitude: Magnitude,
}

impl FunctionModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: &str| {
            Err(SimError::InvalidModel {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        let all_finite = [
            self.mem_base,
            self.mem_per_unit,
            self.mem_exp,
            self.work_base,
            self.work_exp,
            self.ref_memory,
            self.max_speedup,
            self.noise_sigma,
            self.cold_start_ms.0,
            self.cold_start_ms.1,
            self.timeout_ms,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return bad("all parameters must be finite");
        }
        if self.name.is_empty() {
            return bad("name is empty");
        }
        if self.payload_dims == 0 {
            return bad("payload_dims must be at least 1");
        }
        if self.mem_base < 0.0 || self.mem_per_unit < 0.0 || self.mem_exp <= 0.0 {
            return bad("memory curve needs mem_base >= 0, mem_per_unit >= 0, mem_exp > 0");
        }
        if self.work_base <= 0.0 || self.work_exp <= 0.0 {
            return bad("work curve needs work_base > 0 and work_exp > 0");
        }
        if self.ref_memory <= 0.0 || self.max_speedup < 1.0 {
            return bad("ref_memory must be positive and max_speedup >= 1");
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative");
        }
        let (mean, jitter) = self.cold_start_ms;
        if jitter < 0.0 || mean - jitter <= 0.0 {
            return bad("cold start needs 0 <= jitter < mean");
        }
        if self.timeout_ms <= 0.0 {
            return bad("timeout_ms must be positive");
        }
        Ok(())
    }

    fn check_dims(&self, payload: &PayloadVector) -> Result<(), SimError> {
        if payload.dims() != self.payload_dims {
            return Err(SimError::DimensionMismatch {
                function: self.name.clone(),
                expected: self.payload_dims,
                got: payload.dims(),
            });
        }
        Ok(())
    }

    fn magnitude(&self, payload: &PayloadVector) -> f64 {
        let v = payload.values();
        let n = v.len() as f64;
        match self.magnitude {
            Magnitude::GeometricMean => {
                if v.contains(&0.0) {
                    0.0
                } else {
                    (v.iter().map(|x| x.ln()).sum::<f64>() / n).exp()
                }
            }
            Magnitude::ArithmeticMean => v.iter().sum::<f64>() / n,
        }
    }

    fn speedup(&self, memory: MemoryMb) -> f64 {
        (memory.as_f64() / self.ref_memory).min(self.max_speedup)
    }
}

/// Memory floor of a payload in MB; below it the invocation runs out of memory.
pub fn required_memory(model: &FunctionModel, payload: &PayloadVector) -> Result<f64, SimError> {
    model.check_dims(payload)?;
    let mag = if payload.dims() == 1 {
        payload.values()[0]
    } else {
        model.magnitude(payload)
    };
    Ok(model.mem_base + model.mem_per_unit * mag.powf(model.mem_exp))
}

/// Noise-free execution time in ms.
pub fn ground_truth_duration(
    model: &FunctionModel,
    payload: &PayloadVector,
    memory: MemoryMb,
) -> Result<f64, SimError> {
    model.check_dims(payload)?;
    let mag = if payload.dims() == 1 {
        payload.values()[0]
    } else {
        model.magnitude(payload)
    };
    let work = model.work_base * mag.powf(model.work_exp);
    Ok(work / model.speedup(memory))
}

/// Warm instances per memory size, each tagged with the tick it was last used.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePool {
    keep_alive: u64,
    instances: BTreeMap<u32, Vec<u64>>,
}

impl Default for InstancePool {
    fn default() -> Self {
        Self::new(DEFAULT_KEEP_ALIVE)
    }
}

impl InstancePool {
    pub fn new(keep_alive: u64) -> Self {
        Self {
            keep_alive,
            instances: BTreeMap::new(),
        }
    }

    pub fn expire(&mut self, now: u64) {
        let keep_alive = self.keep_alive;
        self.instances.retain(|_, v| {
            v.retain(|last| now.saturating_sub(*last) <= keep_alive);
            !v.is_empty()
        });
    }

    pub fn is_warm(&self, memory: MemoryMb, now: u64) -> bool {
        self.instances.get(&memory.get()).is_some_and(|v| {
            v.iter()
                .any(|last| now.saturating_sub(*last) <= self.keep_alive)
        })
    }

    pub fn warm_count(&self, memory: MemoryMb) -> usize {
        self.instances.get(&memory.get()).map_or(0, Vec::len)
    }

    /// Claims an instance at `memory`; returns true when it was warm.
    fn acquire(&mut self, memory: MemoryMb, now: u64) -> bool {
        let slot = self.instances.entry(memory.get()).or_default();
        match slot.iter_mut().max() {
            Some(last) => {
                *last = now;
                true
            }
            None => {
                slot.push(now);
                false
            }
        }
    }
}

/// Position of one request in the deterministic random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestKey {
    pub seed: u64,
    pub counter: u64,
}

impl RequestKey {
    fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        rng
    }
}

/// Executes one simulated invocation and updates the instance pool.
pub fn invoke(
    model: &FunctionModel,
    payload: &PayloadVector,
    memory: MemoryMb,
    pool: &mut InstancePool,
    key: RequestKey,
    cost_model: &CostModel,
) -> Result<InvocationRecord, SimError> {
    if !MemoryRange::default().contains(memory.get()) {
        return Err(SimError::MemoryOutOfRange(memory.get()));
    }
    let required = required_memory(model, payload)?;
    let now = key.counter;
    pool.expire(now);

    let request_id = format!("{}-{:08}", model.name, key.counter);
    let raw = if memory.as_f64() < required {
        // The container is killed; nothing is added to the pool.
        let charge = compute_cost(OOM_ABORT_MS as f64, memory, cost_model);
        RawRecord {
            request_id,
            payload: payload.values().to_vec(),
            memory_size: memory.get(),
            memory_used: memory.as_f64(),
            memory_utilisation: None,
            billed_duration: OOM_ABORT_MS,
            billed_gb_s: None,
            cost_usd: charge.usd,
            cold_start: false,
            init_duration: 0.0,
            function_error: FunctionError::Oom,
            timestamp: now,
        }
    } else {
        let mut rng = key.rng();
        let noise = if model.noise_sigma > 0.0 {
            LogNormal::new(0.0, model.noise_sigma)
                .expect("sigma validated non-negative")
                .sample(&mut rng)
        } else {
            1.0
        };
        let duration = ground_truth_duration(model, payload, memory)? * noise;
        let warm = pool.acquire(memory, now);
        let init = if warm {
            0.0
        } else {
            let (mean, jitter) = model.cold_start_ms;
            if jitter > 0.0 {
                rng.random_range(mean - jitter..=mean + jitter)
            } else {
                mean
            }
        };
        let (exec, error) = if duration > model.timeout_ms {
            (model.timeout_ms, FunctionError::Timeout)
        } else {
            (duration, FunctionError::None)
        };
        let billed = (exec + init).ceil() as u64;
        let charge = compute_cost(billed as f64, memory, cost_model);
        RawRecord {
            request_id,
            payload: payload.values().to_vec(),
            memory_size: memory.get(),
            memory_used: required,
            memory_utilisation: None,
            billed_duration: billed,
            billed_gb_s: None,
            cost_usd: charge.usd,
            cold_start: !warm,
            init_duration: init,
            function_error: error,
            timestamp: now,
        }
    };
    Ok(validate_record(raw)?)
}

/// Lowest memory on the grid whose noise-free warm execution meets the deadline,
/// the budget and the memory floor. `None` when no grid point qualifies.
pub fn optimal_config_oracle(
    model: &FunctionModel,
    payload: &PayloadVector,
    constraints: &SloConstraints,
    memory_step: u32,
    range: MemoryRange,
    cost_model: &CostModel,
) -> Result<Option<MemoryMb>, SimError> {
    let required = required_memory(model, payload)?;
    for m in range.grid(memory_step) {
        if m.as_f64() < required {
            continue;
        }
        let d = ground_truth_duration(model, payload, m)?;
        if d > model.timeout_ms || d > constraints.deadline_ms {
            continue;
        }
        if compute_cost(d.ceil(), m, cost_model).usd <= constraints.budget_usd {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

/// Noise-free check that an allocation would succeed within the deadline.
pub fn meets_deadline_noise_free(
    model: &FunctionModel,
    payload: &PayloadVector,
    memory: MemoryMb,
    deadline_ms: f64,
) -> Result<bool, SimError> {
    if memory.as_f64() < required_memory(model, payload)? {
        return Ok(false);
    }
    let d = ground_truth_duration(model, payload, memory)?;
    Ok(d <= model.timeout_ms && d <= deadline_ms)
}

/// A function execution backend.
pub trait Backend {
    fn payload_dims(&self, function: &str) -> Option<usize>;

    fn is_warm(&self, function: &str, memory: MemoryMb) -> bool;

    fn invoke(
        &mut self,
        function: &str,
        payload: &PayloadVector,
        memory: MemoryMb,
    ) -> Result<InvocationRecord, SimError>;
}

/// Simulated backend; invocations are serialized through one request counter.
#[derive(Debug, Clone)]
pub struct Simulator {
    models: BTreeMap<String, FunctionModel>,
    pools: BTreeMap<String, InstancePool>,
    cost_model: CostModel,
    keep_alive: u64,
    seed: u64,
    counter: u64,
}

impl Simulator {
    pub fn new(
        models: impl IntoIterator<Item = FunctionModel>,
        cost_model: CostModel,
        seed: u64,
    ) -> Result<Self, SimError> {
        let mut map = BTreeMap::new();
        for m in models {
            m.validate()?;
            map.insert(m.name.clone(), m);
        }
        Ok(Self {
            models: map,
            pools: BTreeMap::new(),
            cost_model,
            keep_alive: DEFAULT_KEEP_ALIVE,
            seed,
            counter: 0,
        })
    }

    pub fn with_keep_alive(mut self, ticks: u64) -> Self {
        self.keep_alive = ticks;
        self
    }

    pub fn model(&self, function: &str) -> Option<&FunctionModel> {
        self.models.get(function)
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost_model
    }

    pub fn invocations(&self) -> u64 {
        self.counter
    }
}

impl Backend for Simulator {
    fn payload_dims(&self, function: &str) -> Option<usize> {
        self.models.get(function).map(|m| m.payload_dims)
    }

    fn is_warm(&self, function: &str, memory: MemoryMb) -> bool {
        self.pools
            .get(function)
            .is_some_and(|p| p.is_warm(memory, self.counter))
    }

    fn invoke(
        &mut self,
        function: &str,
        payload: &PayloadVector,
        memory: MemoryMb,
    ) -> Result<InvocationRecord, SimError> {
        let model = self
            .models
            .get(function)
            .ok_or_else(|| SimError::UnknownFunction(function.to_string()))?;
        let pool = self
            .pools
            .entry(function.to_string())
            .or_insert_with(|| InstancePool::new(self.keep_alive));
        let key = RequestKey {
            seed: self.seed,
            counter: self.counter,
        };
        let rec = invoke(model, payload, memory, pool, key, &self.cost_model)?;
        self.counter += 1;
        Ok(rec)
    }
}

/// Loads function models from a JSON array of objects.
pub fn load_models(text: &str) -> Result<Vec<FunctionModel>, SimError> {
    let models: Vec<FunctionModel> =
        serde_json::from_str(text).map_err(|e| SimError::InvalidModel {
            name: "<file>".into(),
            reason: e.to_string(),
        })?;
    for m in &models {
        m.validate()?;
    }
    Ok(models)
}

#[allow(clippy::too_many_arguments)]
fn preset(
    name: &str,
    payload_dims: usize,
    mem: (f64, f64, f64),
    work: (f64, f64),
    ref_memory: f64,
    max_speedup: f64,
    cold_start_ms: (f64, f64),
) -> FunctionModel {
    FunctionModel {
        name: name.to_string(),
        payload_dims,
        mem_base: mem.0,
        mem_per_unit: mem.1,
        mem_exp: mem.2,
        work_base: work.0,
        work_exp: work.1,
        ref_memory,
        max_speedup,
        noise_sigma: default_noise(),
        cold_start_ms,
        timeout_ms: 900_000.0,
        magnitude: Magnitude::GeometricMean,
    }
}

/// Built-in models named after common serverless benchmark functions.
///
/// Shapes only: duration grows with the payload, speedup from extra memory
/// saturates, and each payload has a memory floor. The numbers are fixtures.
pub fn presets() -> Vec<FunctionModel> {
    vec![
        preset(
            "matmul",
            1,
            (1000.0, 1.2e-5, 2.0),
            (600.0, 0.35),
            256.0,
            1.5,
            (450.0, 50.0),
        ),
        preset(
            "linpack",
            1,
            (750.0, 0.15, 1.0),
            (900.0, 0.3),
            320.0,
            1.5,
            (500.0, 60.0),
        ),
        preset(
            "pyaes",
            2,
            (700.0, 0.16, 1.0),
            (300.0, 0.3),
            256.0,
            1.5,
            (300.0, 40.0),
        ),
        preset(
            "graph-mst",
            1,
            (750.0, 0.16, 1.0),
            (450.0, 0.3),
            320.0,
            1.5,
            (600.0, 80.0),
        ),
        preset(
            "graph-bfs",
            1,
            (750.0, 0.15, 1.0),
            (300.0, 0.3),
            256.0,
            1.5,
            (600.0, 80.0),
        ),
        preset(
            "graph-pagerank",
            1,
            (800.0, 0.15, 1.0),
            (750.0, 0.3),
            384.0,
            1.5,
            (650.0, 80.0),
        ),
        preset(
            "dynamic-html",
            1,
            (800.0, 0.14, 1.0),
            (250.0, 0.25),
            192.0,
            1.5,
            (250.0, 30.0),
        ),
        preset(
            "chameleon",
            2,
            (700.0, 0.16, 1.0),
            (400.0, 0.3),
            256.0,
            1.5,
            (280.0, 30.0),
        ),
    ]
}

pub fn find_preset(name: &str) -> Option<FunctionModel> {
    presets().into_iter().find(|m| m.name == name)
}
