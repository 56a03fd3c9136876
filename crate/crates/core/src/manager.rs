//! Online loop: classify the payload, pick a memory size, invoke on a warm
//! instance when one exists, log the record, and periodically refit the model
//! on a sliding window of recent records.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    CostModel, DomainError, InvocationRecord, MemoryMb, MemoryRange, PayloadVector, SloConstraints,
};
use crate::forest::{
    fit_forest, grid_search, score_outputs, Forest, ForestError, OutputScore, ParamGrid,
};
use crate::optimizer::{
    enumerate_candidates, select_configuration, SelectionPolicy, SelectionResult,
};
use crate::profiler::{training_samples, ProfileError};
use crate::sim::{Backend, SimError};

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("no model for function `{0}`")]
    ModelMissing(String),
    #[error("invalid manager configuration: {0}")]
    InvalidConfig(String),
    #[error("payload has {got} dimensions, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerConfig {
    /// Invocations between retraining checks.
    pub monitoring_window: usize,
    /// Most recent records used when retraining.
    pub retrain_window: usize,
    pub fallback_memory: MemoryMb,
    pub policy: SelectionPolicy,
    pub constraints: SloConstraints,
    /// Candidate grid for selection.
    pub memory_range: MemoryRange,
    pub mem_step: u32,
    /// Closed per-dimension payload range seen during profiling.
    pub payload_bounds: Vec<(f64, f64)>,
    pub base_seed: u64,
    /// Re-run the default grid search on every retrain instead of reusing
    /// the current hyperparameters.
    pub retune: bool,
}

impl ManagerConfig {
    /// Defaults around a trained model; payload bounds come from its training range.
    pub fn for_model(forest: &Forest, constraints: SloConstraints, base_seed: u64) -> Self {
        Self {
            monitoring_window: 200,
            retrain_window: 1000,
            fallback_memory: MemoryMb::MAX,
            policy: SelectionPolicy::default(),
            constraints,
            memory_range: MemoryRange::default(),
            mem_step: 1,
            payload_bounds: forest.feature_bounds()[1..].to_vec(),
            base_seed,
            retune: false,
        }
    }

    pub fn validate(&self) -> Result<(), ManagerError> {
        let bad = |m: &str| Err(ManagerError::InvalidConfig(m.to_string()));
        if self.monitoring_window == 0 || self.retrain_window == 0 {
            return bad("windows must be at least 1");
        }
        if self.mem_step == 0 {
            return bad("mem_step must be at least 1");
        }
        if self.payload_bounds.is_empty() || self.payload_bounds.iter().any(|(lo, hi)| !(lo <= hi))
        {
            return bad("payload bounds must be non-empty closed intervals");
        }
        Ok(())
    }
}

/// Append-only invocation log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsStore {
    records: Vec<InvocationRecord>,
}

impl MetricsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: InvocationRecord) -> Result<(), ManagerError> {
        if let Some(last) = self.records.last() {
            if record.timestamp < last.timestamp {
                return Err(ManagerError::InvalidConfig(format!(
                    "timestamp {} precedes last logged {}",
                    record.timestamp, last.timestamp
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// The last `w` records, or all of them when fewer exist.
    pub fn window(&self, w: usize) -> &[InvocationRecord] {
        &self.records[self.records.len().saturating_sub(w)..]
    }

    pub fn records(&self) -> &[InvocationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadClass {
    InRange,
    BelowMin,
    AboveMax,
}

/// Closed-interval test per dimension; any dimension above its maximum wins.
pub fn classify(payload: &PayloadVector, bounds: &[(f64, f64)]) -> PayloadClass {
    let v = payload.values();
    if v.iter().zip(bounds).any(|(x, (_, hi))| x > hi) {
        PayloadClass::AboveMax
    } else if v.iter().zip(bounds).any(|(x, (lo, _))| x < lo) {
        PayloadClass::BelowMin
    } else {
        PayloadClass::InRange
    }
}

/// Payload the model is queried with: components below the profiled minimum
/// are raised to it.
pub fn clamp_to_bounds(
    payload: &PayloadVector,
    bounds: &[(f64, f64)],
) -> Result<PayloadVector, DomainError> {
    PayloadVector::new(
        payload
            .values()
            .iter()
            .zip(bounds)
            .map(|(x, (lo, _))| x.max(*lo))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionResult {
    pub record: InvocationRecord,
    pub memory: MemoryMb,
    pub class: PayloadClass,
    /// True when the payload was out of range or no candidate was feasible.
    pub fallback: bool,
    /// Whether a warm instance existed at the chosen memory before the call.
    pub warm_hit: bool,
    pub selection: Option<SelectionResult>,
    pub retrained: bool,
}

/// Accuracy of the model in service on the window it is about to be refit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    /// Records logged when the check ran.
    pub at_invocation: usize,
    /// Duration, memory and success, in that order.
    pub scores: Vec<OutputScore>,
}

/// Scores `forest` on `records`; `None` when fewer than two usable rows exist.
pub fn score_window(forest: &Forest, records: &[InvocationRecord]) -> Option<Vec<OutputScore>> {
    let samples = training_samples(records).ok()?;
    if samples.n_features() != forest.n_features() {
        return None;
    }
    let mut pred = Vec::with_capacity(samples.len());
    let mut actual = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        pred.push(forest.predict(samples.features(i)).ok()?);
        actual.push(samples.target(i).to_vec());
    }
    score_outputs(&pred, &actual).ok()
}

/// Seed of the `counter`-th retraining.
pub fn retrain_seed(base_seed: u64, counter: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(counter);
    rng.next_u64()
}

pub struct Manager<B: Backend> {
    function: String,
    config: ManagerConfig,
    forest: Forest,
    backend: B,
    cost_model: CostModel,
    store: MetricsStore,
    since_retrain: usize,
    retrain_count: u64,
    window_scores: Vec<WindowScore>,
}

impl<B: Backend> Manager<B> {
    pub fn new(
        function: impl Into<String>,
        forest: Forest,
        config: ManagerConfig,
        backend: B,
        cost_model: CostModel,
    ) -> Result<Self, ManagerError> {
        config.validate()?;
        let function = function.into();
        if config.payload_bounds.len() + 1 != forest.n_features() {
            return Err(ManagerError::DimensionMismatch {
                expected: forest.n_features() - 1,
                got: config.payload_bounds.len(),
            });
        }
        if backend.payload_dims(&function).is_none() {
            return Err(SimError::UnknownFunction(function).into());
        }
        Ok(Self {
            function,
            config,
            forest,
            backend,
            cost_model,
            store: MetricsStore::new(),
            since_retrain: 0,
            retrain_count: 0,
            window_scores: Vec::new(),
        })
    }

    pub fn forest(&self) -> &Forest {
        &self.forest
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn store(&self) -> &MetricsStore {
        &self.store
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn retrain_count(&self) -> u64 {
        self.retrain_count
    }

    /// One entry per retraining check. A refit always replaces the model, so
    /// these are the numbers to watch for a window that made things worse.
    pub fn window_scores(&self) -> &[WindowScore] {
        &self.window_scores
    }

    /// Runs the optimizer for `payload` against the current model.
    pub fn select(&self, payload: &PayloadVector) -> Result<SelectionResult, ManagerError> {
        let c = enumerate_candidates(
            &self.forest,
            payload,
            self.config.memory_range,
            self.config.mem_step,
            &self.cost_model,
        )?;
        Ok(select_configuration(
            &c,
            &self.config.constraints,
            &self.config.policy,
        ))
    }

    /// Memory for `payload` and whether it came from a fallback rule.
    pub fn decide(
        &self,
        payload: &PayloadVector,
    ) -> Result<(MemoryMb, PayloadClass, bool, Option<SelectionResult>), ManagerError> {
        let bounds = &self.config.payload_bounds;
        if payload.dims() != bounds.len() {
            return Err(ManagerError::DimensionMismatch {
                expected: bounds.len(),
                got: payload.dims(),
            });
        }
        let class = classify(payload, bounds);
        let query = match class {
            PayloadClass::AboveMax => return Ok((self.config.fallback_memory, class, true, None)),
            PayloadClass::BelowMin => clamp_to_bounds(payload, bounds)?,
            PayloadClass::InRange => payload.clone(),
        };
        let sel = self.select(&query)?;
        let out_of_range = class != PayloadClass::InRange;
        Ok(match sel.chosen {
            Some(c) => (c.memory, class, out_of_range, Some(sel)),
            None => (self.config.fallback_memory, class, true, Some(sel)),
        })
    }

    pub fn handle_invocation(
        &mut self,
        payload: &PayloadVector,
    ) -> Result<ExecutionResult, ManagerError> {
        let (memory, class, fallback, selection) = self.decide(payload)?;
        let warm_hit = self.backend.is_warm(&self.function, memory);
        let record = self.backend.invoke(&self.function, payload, memory)?;
        self.store.append(record.clone())?;
        self.since_retrain += 1;
        let retrained = self.maybe_retrain();
        Ok(ExecutionResult {
            record,
            memory,
            class,
            fallback,
            warm_hit,
            selection,
            retrained,
        })
    }

    /// Refits once `monitoring_window` records have arrived since the last
    /// refit. A failed refit keeps the current model.
    pub fn maybe_retrain(&mut self) -> bool {
        if self.since_retrain < self.config.monitoring_window {
            return false;
        }
        self.since_retrain = 0;
        let seed = retrain_seed(self.config.base_seed, self.retrain_count);
        self.retrain_count += 1;
        let window = self.store.window(self.config.retrain_window);
        if let Some(scores) = score_window(&self.forest, window) {
            self.window_scores.push(WindowScore {
                at_invocation: self.store.len(),
                scores,
            });
        }
        match retrain(window, &self.forest, &self.config, seed) {
            Ok(f) => {
                self.forest = f;
                true
            }
            Err(e) => {
                log::warn!("retraining failed, keeping current model: {e}");
                false
            }
        }
    }
}

/// Fits a successor model on `records`.
pub fn retrain(
    records: &[InvocationRecord],
    current: &Forest,
    config: &ManagerConfig,
    seed: u64,
) -> Result<Forest, ManagerError> {
    let samples = training_samples(records)?;
    if samples.n_features() != current.n_features() {
        return Err(ManagerError::DimensionMismatch {
            expected: current.n_features() - 1,
            got: samples.n_features() - 1,
        });
    }
    if config.retune {
        let k = 5.min(samples.len());
        Ok(grid_search(&samples, &ParamGrid::default(), k, seed)?.forest)
    } else {
        Ok(fit_forest(&samples, current.hyperparams(), seed)?)
    }
}
