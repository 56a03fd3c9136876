//! Cross-validated grid search over forest hyperparameters.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_forest, score_outputs, Forest, ForestError, Hyperparams, OutputScore, Samples};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub n_estimators: Vec<usize>,
    pub max_depth: Vec<Option<usize>>,
    pub min_samples_split: Vec<usize>,
    pub min_samples_leaf: Vec<usize>,
    #[serde(default = "default_max_features")]
    pub max_features: Vec<Option<usize>>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: Vec<bool>,
}

fn default_max_features() -> Vec<Option<usize>> {
    vec![None]
}

fn default_bootstrap() -> Vec<bool> {
    vec![true]
}

impl Default for ParamGrid {
    fn default() -> Self {
        Self {
            n_estimators: vec![50, 100, 200],
            max_depth: vec![Some(8), Some(16), None],
            min_samples_split: vec![2, 8],
            min_samples_leaf: vec![1, 4],
            max_features: default_max_features(),
            bootstrap: default_bootstrap(),
        }
    }
}

impl ParamGrid {
    /// Grid with a single point.
    pub fn single(p: Hyperparams) -> Self {
        Self {
            n_estimators: vec![p.n_estimators],
            max_depth: vec![p.max_depth],
            min_samples_split: vec![p.min_samples_split],
            min_samples_leaf: vec![p.min_samples_leaf],
            max_features: vec![p.max_features],
            bootstrap: vec![p.bootstrap],
        }
    }

    /// All grid points, fields varying in declaration order (last fastest).
    pub fn points(&self) -> Vec<Hyperparams> {
        let mut out = Vec::new();
        for &n_estimators in &self.n_estimators {
            for &max_depth in &self.max_depth {
                for &min_samples_split in &self.min_samples_split {
                    for &min_samples_leaf in &self.min_samples_leaf {
                        for &max_features in &self.max_features {
                            for &bootstrap in &self.bootstrap {
                                out.push(Hyperparams {
                                    n_estimators,
                                    max_depth,
                                    min_samples_split,
                                    min_samples_leaf,
                                    max_features,
                                    bootstrap,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub params: Hyperparams,
    /// Mean over folds of the normalized validation MAE.
    pub score: f64,
    pub fold_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub chosen: Hyperparams,
    pub k_folds: usize,
    pub n_samples: usize,
    pub grid: Vec<GridScore>,
    /// Per-output scores on the held-out split, when one was used.
    pub holdout: Option<Vec<OutputScore>>,
}

#[derive(Debug, Clone)]
pub struct TuningOutcome {
    pub params: Hyperparams,
    pub report: TrainReport,
    pub forest: Forest,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Validation folds of a seeded shuffle; sizes differ by at most one.
pub fn k_fold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, ForestError> {
    if k < 2 || n < k {
        return Err(ForestError::TooFewSamples { n, k });
    }
    let idx = shuffled(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Mean over outputs of MAE / std; outputs with zero spread are skipped.
fn normalized_mae(pred: &[Vec<f64>], actual: &[Vec<f64>], std: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut used = 0;
    for (o, &s) in std.iter().enumerate() {
        if s <= 0.0 {
            continue;
        }
        let mae = pred
            .iter()
            .zip(actual)
            .map(|(p, a)| (p[o] - a[o]).abs())
            .sum::<f64>()
            / actual.len() as f64;
        total += mae / s;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

type GroupKey = (Option<usize>, usize, usize, Option<usize>, bool);

fn group_key(p: &Hyperparams) -> GroupKey {
    (
        p.max_depth,
        p.min_samples_split,
        p.min_samples_leaf,
        p.max_features,
        p.bootstrap,
    )
}

/// k-fold grid search, then a refit of the winner on all of `samples`.
///
/// Points sharing everything but `n_estimators` are scored from one forest of
/// the largest size: tree `i` depends only on `(seed, i)`, so the first `s`
/// trees are exactly the forest of size `s`.
pub fn grid_search(
    samples: &Samples,
    grid: &ParamGrid,
    k: usize,
    seed: u64,
) -> Result<TuningOutcome, ForestError> {
    let points = grid.points();
    if points.is_empty() {
        return Err(ForestError::EmptyGrid);
    }
    for p in &points {
        p.validate()?;
    }
    if samples.is_empty() {
        return Err(ForestError::EmptySamples);
    }
    let data = samples.canonicalized();
    let n = data.len();
    let folds = k_fold_indices(n, k, seed)?;
    let std = data.output_std();

    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        groups.entry(group_key(p)).or_default().push(i);
    }

    let mut fold_scores = vec![Vec::with_capacity(k); points.len()];
    for (fi, fold) in folds.iter().enumerate() {
        let mut in_fold = vec![false; n];
        fold.iter().for_each(|&i| in_fold[i] = true);
        let train_idx: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
        let train = data.subset(&train_idx);
        let valid = data.subset(fold);
        let actual: Vec<Vec<f64>> = (0..valid.len()).map(|i| valid.target(i).to_vec()).collect();
        let fold_seed = seed.wrapping_add(fi as u64 + 1);

        for members in groups.values() {
            let max_s = members
                .iter()
                .map(|&i| points[i].n_estimators)
                .max()
                .unwrap_or(1);
            let params = Hyperparams {
                n_estimators: max_s,
                ..points[members[0]]
            };
            let forest = fit_forest(&train, &params, fold_seed)?;
            let mut sizes: Vec<usize> = members.iter().map(|&i| points[i].n_estimators).collect();
            sizes.sort_unstable();
            sizes.dedup();
            let by_size = prefix_predictions(&forest, &valid, &sizes);
            for &i in members {
                let s = sizes.binary_search(&points[i].n_estimators).unwrap_or(0);
                fold_scores[i].push(normalized_mae(&by_size[s], &actual, &std));
            }
        }
    }

    let grid_scores: Vec<GridScore> = points
        .iter()
        .zip(fold_scores)
        .map(|(p, fs)| GridScore {
            params: *p,
            score: fs.iter().sum::<f64>() / fs.len() as f64,
            fold_scores: fs,
        })
        .collect();

    let depth_rank = |d: Option<usize>| d.unwrap_or(usize::MAX);
    let mut best = 0;
    for (i, g) in grid_scores.iter().enumerate().skip(1) {
        let b = &grid_scores[best];
        let better = g.score < b.score
            || (g.score == b.score
                && (g.params.n_estimators, depth_rank(g.params.max_depth))
                    < (b.params.n_estimators, depth_rank(b.params.max_depth)));
        if better {
            best = i;
        }
    }
    let chosen = grid_scores[best].params;
    log::info!(
        "grid search chose {chosen:?} (score {:.4})",
        grid_scores[best].score
    );
    let forest = fit_forest(&data, &chosen, seed)?;
    Ok(TuningOutcome {
        params: chosen,
        report: TrainReport {
            chosen,
            k_folds: k,
            n_samples: n,
            grid: grid_scores,
            holdout: None,
        },
        forest,
    })
}

/// Predictions of `valid` for each prefix size in ascending `sizes`.
fn prefix_predictions(forest: &Forest, valid: &Samples, sizes: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let no = forest.n_outputs();
    let mut out = vec![Vec::with_capacity(valid.len()); sizes.len()];
    for i in 0..valid.len() {
        let x = valid.features(i);
        let mut sum = vec![0.0; no];
        let mut next = 0;
        for (t, tree) in forest.trees().iter().enumerate() {
            let leaf = &tree.nodes()[tree.leaf_index(x)].value;
            sum.iter_mut().zip(leaf).for_each(|(s, v)| *s += v);
            while next < sizes.len() && sizes[next] == t + 1 {
                out[next].push(sum.iter().map(|s| s / (t + 1) as f64).collect());
                next += 1;
            }
        }
    }
    out
}

/// Holds out `fraction` of the rows, tunes on the rest, scores the tuned
/// forest on the held-out rows, then refits the winner on everything.
pub fn tune_with_holdout(
    samples: &Samples,
    grid: &ParamGrid,
    k: usize,
    fraction: f64,
    seed: u64,
) -> Result<TuningOutcome, ForestError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(ForestError::InvalidHyperparams(format!(
            "holdout fraction {fraction} not in [0, 1)"
        )));
    }
    let data = samples.canonicalized();
    let n = data.len();
    let n_hold = (n as f64 * fraction).round() as usize;
    if n_hold < 2 {
        return grid_search(&data, grid, k, seed);
    }
    let idx = shuffled(n, seed ^ 0x5e_ed0f_401d);
    let (hold, rest) = idx.split_at(n_hold);
    let tuned = grid_search(&data.subset(rest), grid, k, seed)?;
    let held = data.subset(hold);
    let pred: Result<Vec<Vec<f64>>, _> = (0..held.len())
        .map(|i| tuned.forest.predict(held.features(i)))
        .collect();
    let actual: Vec<Vec<f64>> = (0..held.len()).map(|i| held.target(i).to_vec()).collect();
    let holdout = score_outputs(&pred?, &actual)?;
    let forest = fit_forest(&data, &tuned.params, seed)?;
    let mut report = tuned.report;
    report.n_samples = n;
    report.holdout = Some(holdout);
    Ok(TuningOutcome {
        params: tuned.params,
        report,
        forest,
    })
}
