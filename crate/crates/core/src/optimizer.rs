//! Online selection: predict every memory size, drop infeasible ones, take the
//! Pareto front over (cost, duration), score it with weighted aggregation and
//! pick the lowest memory among the best scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::domain::{
    compute_cost, CostModel, MemoryMb, MemoryRange, PayloadVector, SloConstraints, Weights,
};
use crate::forest::{Forest, ForestError};
use crate::profiler::features;

/// Predicted outcome of running a payload at one memory size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub memory: MemoryMb,
    pub duration_ms: f64,
    pub memory_used_mb: f64,
    pub success: f64,
    pub cost_usd: f64,
}

impl Candidate {
    /// Builds a candidate whose cost is derived from the duration.
    pub fn new(
        memory: MemoryMb,
        duration_ms: f64,
        memory_used_mb: f64,
        success: f64,
        cost_model: &CostModel,
    ) -> Self {
        let cost_usd = compute_cost(duration_ms.max(0.0), memory, cost_model).usd;
        Self {
            memory,
            duration_ms,
            memory_used_mb,
            success,
            cost_usd,
        }
    }
}

/// One candidate per grid memory in `range`, ascending.
pub fn enumerate_candidates(
    forest: &Forest,
    payload: &PayloadVector,
    range: MemoryRange,
    step: u32,
    cost_model: &CostModel,
) -> Result<Vec<Candidate>, ForestError> {
    let step = step.max(1);
    let mut x = features(MemoryMb::MIN, payload);
    if x.len() != forest.n_features() {
        return Err(ForestError::DimensionMismatch {
            expected: forest.n_features(),
            got: x.len(),
        });
    }
    range
        .grid(step)
        .into_iter()
        .map(|m| {
            x[0] = m.as_f64();
            let y = forest.predict(&x)?;
            Ok(Candidate::new(m, y[0], y[1], y[2], cost_model))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    Deadline,
    Budget,
    Success,
    /// Predicted memory use exceeds the allocation.
    MemoryHeadroom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Minimum predicted success probability.
    pub success_threshold: f64,
    /// When set, also reject candidates whose predicted memory use times
    /// `1 + margin` exceeds the allocation.
    pub memory_headroom: Option<f64>,
    /// Width of the tie window on the aggregated score.
    pub epsilon_z: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            success_threshold: 0.5,
            memory_headroom: Some(0.05),
            epsilon_z: 1e-9,
        }
    }
}

impl SelectionPolicy {
    /// Only the deadline, budget and success predicates.
    pub fn strict_slo() -> Self {
        Self {
            memory_headroom: None,
            ..Self::default()
        }
    }

    pub fn violations(&self, c: &Candidate, constraints: &SloConstraints) -> Vec<Violation> {
        let mut v = Vec::new();
        if !(c.duration_ms <= constraints.deadline_ms) {
            v.push(Violation::Deadline);
        }
        if !(c.cost_usd <= constraints.budget_usd) {
            v.push(Violation::Budget);
        }
        if !(c.success >= self.success_threshold) {
            v.push(Violation::Success);
        }
        if let Some(margin) = self.memory_headroom {
            if !(c.memory_used_mb * (1.0 + margin) <= c.memory.as_f64()) {
                v.push(Violation::MemoryHeadroom);
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub deadline: usize,
    pub budget: usize,
    pub success: usize,
    pub memory_headroom: usize,
}

impl RejectionCounts {
    fn add(&mut self, v: Violation) {
        match v {
            Violation::Deadline => self.deadline += 1,
            Violation::Budget => self.budget += 1,
            Violation::Success => self.success += 1,
            Violation::MemoryHeadroom => self.memory_headroom += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Feasible candidates in input order.
    pub feasible: Vec<Candidate>,
    /// Rejected candidates with every predicate they violate.
    pub rejected: Vec<(Candidate, Vec<Violation>)>,
    /// Per-predicate violation counts; a candidate may count more than once.
    pub counts: RejectionCounts,
}

pub fn filter_feasible(
    candidates: &[Candidate],
    constraints: &SloConstraints,
    policy: &SelectionPolicy,
) -> FilterOutcome {
    let mut out = FilterOutcome {
        feasible: Vec::new(),
        rejected: Vec::new(),
        counts: RejectionCounts::default(),
    };
    for c in candidates {
        let v = policy.violations(c, constraints);
        if v.is_empty() {
            out.feasible.push(*c);
        } else {
            v.iter().for_each(|x| out.counts.add(*x));
            out.rejected.push((*c, v));
        }
    }
    out
}

fn objective_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.cost_usd
        .total_cmp(&b.cost_usd)
        .then(a.duration_ms.total_cmp(&b.duration_ms))
}

/// Non-dominated candidates under minimization of (cost, duration), sorted by
/// cost then duration. Candidates with identical objectives are all kept.
///
/// After sorting, a group of identical points survives iff its duration is
/// strictly below every duration seen in earlier groups.
pub fn pareto_front(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(objective_order);
    let mut front = Vec::new();
    let mut best = f64::INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && objective_order(&sorted[i], &sorted[j]) == Ordering::Equal {
            j += 1;
        }
        let d = sorted[i].duration_ms;
        if d < best {
            front.extend_from_slice(&sorted[i..j]);
            best = d;
        }
        i = j;
    }
    front
}

/// Weighted sum of min-max normalized cost and duration over `front`.
pub fn scalarize(front: &[Candidate], weights: &Weights) -> Vec<f64> {
    let norm = |vals: Vec<f64>| -> Vec<f64> {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        vals.iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    };
    let cost = norm(front.iter().map(|c| c.cost_usd).collect());
    let time = norm(front.iter().map(|c| c.duration_ms).collect());
    cost.iter()
        .zip(&time)
        .map(|(c, t)| weights.cost * c + weights.time * t)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// `None` when no candidate is feasible; the caller falls back.
    pub chosen: Option<Candidate>,
    pub pareto_front: Vec<Candidate>,
    /// Aggregated score of each front member.
    pub scores: Vec<f64>,
    pub candidates: usize,
    pub feasible: usize,
    pub rejections: RejectionCounts,
}

pub fn select_configuration(
    candidates: &[Candidate],
    constraints: &SloConstraints,
    policy: &SelectionPolicy,
) -> SelectionResult {
    let filtered = filter_feasible(candidates, constraints, policy);
    let front = pareto_front(&filtered.feasible);
    let scores = scalarize(&front, &constraints.weights);
    let min_z = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let chosen = front
        .iter()
        .zip(&scores)
        .filter(|(_, z)| **z <= min_z + policy.epsilon_z)
        .map(|(c, _)| *c)
        .min_by_key(|c| c.memory);
    SelectionResult {
        chosen,
        pareto_front: front,
        scores,
        candidates: candidates.len(),
        feasible: filtered.feasible.len(),
        rejections: filtered.counts,
    }
}
