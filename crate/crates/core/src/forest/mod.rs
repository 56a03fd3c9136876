//! Multi-output random forest regression.
//!
//! Trees are CART regressors grown on bootstrap samples; the forest prediction
//! is the plain average of tree predictions. Every prediction also decomposes
//! into a bias (mean root value) plus one contribution per feature, obtained by
//! telescoping node means along each decision path.

mod io;
mod metrics;
mod tree;
mod tuning;

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_model, read_model, save_model, write_model, MODEL_FORMAT, MODEL_VERSION};
pub use metrics::{mae, r2, score, score_outputs, OutputScore};
pub use tree::{fit_tree, Node, RegressionTree, Split};
pub use tuning::{
    grid_search, k_fold_indices, tune_with_holdout, GridScore, ParamGrid, TrainReport,
    TuningOutcome,
};

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("no training samples")]
    EmptySamples,
    #[error("feature vector has {got} components, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target vector has {got} components, expected {expected}")]
    OutputMismatch { expected: usize, got: usize },
    #[error("non-finite value in samples")]
    NonFinite,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("{n} samples cannot be split into {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("actual values have zero variance")]
    DegenerateVariance,
    #[error("{predictions} predictions vs {actuals} actuals (need equal lengths >= 2)")]
    LengthMismatch { predictions: usize, actuals: usize },
    #[error("model version {found}, expected {expected}")]
    VersionMismatch { found: u64, expected: u64 },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Row-major training matrix of features and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    n_features: usize,
    n_outputs: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Samples {
    pub fn new(n_features: usize, n_outputs: usize) -> Self {
        Self {
            n_features,
            n_outputs,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn push(&mut self, features: &[f64], targets: &[f64]) -> Result<(), ForestError> {
        if features.len() != self.n_features {
            return Err(ForestError::DimensionMismatch {
                expected: self.n_features,
                got: features.len(),
            });
        }
        if targets.len() != self.n_outputs {
            return Err(ForestError::OutputMismatch {
                expected: self.n_outputs,
                got: targets.len(),
            });
        }
        if features.iter().chain(targets).any(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite);
        }
        self.x.extend_from_slice(features);
        self.y.extend_from_slice(targets);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len().checked_div(self.n_features).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_outputs..(i + 1) * self.n_outputs]
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        let mut s = Samples::new(self.n_features, self.n_outputs);
        for &i in indices {
            s.x.extend_from_slice(self.features(i));
            s.y.extend_from_slice(self.target(i));
        }
        s
    }

    /// Population standard deviation of each output.
    pub fn output_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.n_outputs)
            .map(|o| {
                let mean = (0..self.len()).map(|i| self.target(i)[o]).sum::<f64>() / n;
                ((0..self.len())
                    .map(|i| (self.target(i)[o] - mean).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt()
            })
            .collect()
    }

    /// Rows sorted by features then targets, so fitting does not depend on input order.
    pub fn canonicalized(&self) -> Samples {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            lexicographic(self.features(a), self.features(b))
                .then_with(|| lexicographic(self.target(a), self.target(b)))
        });
        self.subset(&idx)
    }

    fn feature_bounds(&self) -> Vec<(f64, f64)> {
        (0..self.n_features)
            .map(|f| {
                (0..self.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                    let v = self.features(i)[f];
                    (lo.min(v), hi.max(v))
                })
            })
            .collect()
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_estimators: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Features drawn per split; `None` uses all of them.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: None,
            bootstrap: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ForestError> {
        let bad = |m: &str| Err(ForestError::InvalidHyperparams(m.to_string()));
        if self.n_estimators == 0 {
            return bad("n_estimators must be at least 1");
        }
        if self.min_samples_split < 2 {
            return bad("min_samples_split must be at least 2");
        }
        if self.min_samples_leaf < 1 {
            return bad("min_samples_leaf must be at least 1");
        }
        if self.max_features == Some(0) {
            return bad("max_features must be at least 1");
        }
        Ok(())
    }
}

/// Prediction split into bias and per-feature contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub bias: Vec<f64>,
    /// `contributions[k][o]`: contribution of feature `k` to output `o`.
    pub contributions: Vec<Vec<f64>>,
    pub prediction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<RegressionTree>,
    hyperparams: Hyperparams,
    n_features: usize,
    n_outputs: usize,
    seed: u64,
    /// Training range of each feature.
    feature_bounds: Vec<(f64, f64)>,
}

/// Random stream for tree `index`; independent of how many trees are trained.
fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn fit_forest(
    samples: &Samples,
    params: &Hyperparams,
    seed: u64,
) -> Result<Forest, ForestError> {
    if samples.is_empty() {
        return Err(ForestError::EmptySamples);
    }
    params.validate()?;
    let data = samples.canonicalized();
    let n = data.len();
    let trees = (0..params.n_estimators)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree_rng(seed, i);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            tree::grow(&data, &rows, params, &mut rng)
        })
        .collect();
    Ok(Forest {
        trees,
        hyperparams: *params,
        n_features: data.n_features(),
        n_outputs: data.n_outputs(),
        seed,
        feature_bounds: data.feature_bounds(),
    })
}

impl Forest {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_bounds(&self) -> &[(f64, f64)] {
        &self.feature_bounds
    }

    /// Forest made of the first `n` trees. Identical to training `n` trees
    /// with the same seed, since each tree has its own random stream.
    pub fn truncated(&self, n: usize) -> Forest {
        let n = n.clamp(1, self.trees.len());
        let mut f = self.clone();
        f.trees.truncate(n);
        f.hyperparams.n_estimators = n;
        f
    }

    fn check(&self, x: &[f64]) -> Result<(), ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Mean of the tree predictions, summed in tree order.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, ForestError> {
        self.check(x)?;
        let mut out = vec![0.0; self.n_outputs];
        for t in &self.trees {
            let leaf = &t.nodes()[t.leaf_index(x)].value;
            for (o, v) in out.iter_mut().zip(leaf) {
                *o += v;
            }
        }
        let s = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= s);
        Ok(out)
    }

    pub fn predict_with_contributions(&self, x: &[f64]) -> Result<Decomposition, ForestError> {
        self.check(x)?;
        let (nf, no) = (self.n_features, self.n_outputs);
        let mut bias = vec![0.0; no];
        let mut flat = vec![0.0; nf * no];
        for t in &self.trees {
            for (b, v) in bias.iter_mut().zip(t.bias()) {
                *b += v;
            }
            t.accumulate_contributions(x, &mut flat);
        }
        let s = self.trees.len() as f64;
        bias.iter_mut().for_each(|v| *v /= s);
        flat.iter_mut().for_each(|v| *v /= s);
        let contributions = flat.chunks(no).map(<[f64]>::to_vec).collect();
        Ok(Decomposition {
            bias,
            contributions,
            prediction: self.predict(x)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid_samples(noise: bool) -> Samples {
        let mut s = Samples::new(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in (128..=1280).step_by(128) {
            for p in (10..=2010).step_by(200) {
                let (m, p) = (m as f64, p as f64);
                let jitter = if noise {
                    rng.random_range(0.95..1.05)
                } else {
                    1.0
                };
                let ok = if m >= 100.0 + p * 0.2 { 1.0 } else { 0.0 };
                s.push(&[m, p], &[p / m * 100.0 * jitter, 100.0 + 0.2 * p, ok])
                    .unwrap();
            }
        }
        s
    }

    fn memorizing() -> Hyperparams {
        Hyperparams {
            n_estimators: 1,
            bootstrap: false,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn single_leaf_forest_is_constant() {
        let mut s = Samples::new(1, 3);
        s.push(&[1.0], &[100.0, 50.0, 1.0]).unwrap();
        let f = fit_forest(
            &s,
            &Hyperparams {
                n_estimators: 3,
                ..Hyperparams::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(f.predict(&[42.0]).unwrap(), vec![100.0, 50.0, 1.0]);
        let d = f.predict_with_contributions(&[0.0]).unwrap();
        assert_eq!(d.bias, vec![100.0, 50.0, 1.0]);
        assert!(d.contributions.iter().flatten().all(|c| *c == 0.0));
    }

    #[test]
    fn two_tree_average() {
        let mut a = Samples::new(1, 1);
        a.push(&[0.0], &[100.0]).unwrap();
        let mut b = Samples::new(1, 1);
        b.push(&[0.0], &[200.0]).unwrap();
        let mut f = fit_forest(&a, &memorizing(), 0).unwrap();
        let g = fit_forest(&b, &memorizing(), 0).unwrap();
        f.trees.push(g.trees[0].clone());
        assert_eq!(f.predict(&[3.0]).unwrap(), vec![150.0]);
    }

    #[test]
    fn depth_one_contribution() {
        let mut s = Samples::new(2, 1);
        for (x, y) in [([0.0, 5.0], 1.0), ([0.0, 5.0], 3.0), ([1.0, 5.0], 10.0)] {
            s.push(&x, &[y]).unwrap();
        }
        let params = Hyperparams {
            max_depth: Some(1),
            ..memorizing()
        };
        let f = fit_forest(&s, &params, 0).unwrap();
        let d = f.predict_with_contributions(&[1.0, 5.0]).unwrap();
        let root = 14.0 / 3.0;
        assert_eq!(d.bias, vec![root]);
        assert_eq!(d.contributions[0], vec![10.0 - root]);
        assert_eq!(d.contributions[1], vec![0.0]);
    }

    #[test]
    fn memorization_reproduces_targets() {
        let s = grid_samples(true);
        let f = fit_forest(&s, &memorizing(), 3).unwrap();
        for i in 0..s.len() {
            assert_eq!(f.predict(s.features(i)).unwrap(), s.target(i));
        }
    }

    #[test]
    fn same_seed_same_forest() {
        let s = grid_samples(true);
        let p = Hyperparams {
            n_estimators: 10,
            ..Hyperparams::default()
        };
        assert_eq!(
            fit_forest(&s, &p, 11).unwrap(),
            fit_forest(&s, &p, 11).unwrap()
        );
        assert_ne!(
            fit_forest(&s, &p, 11).unwrap(),
            fit_forest(&s, &p, 12).unwrap()
        );
    }

    #[test]
    fn truncation_matches_smaller_forest() {
        let s = grid_samples(true);
        let big = fit_forest(
            &s,
            &Hyperparams {
                n_estimators: 12,
                ..Hyperparams::default()
            },
            5,
        )
        .unwrap();
        let small = fit_forest(
            &s,
            &Hyperparams {
                n_estimators: 5,
                ..Hyperparams::default()
            },
            5,
        )
        .unwrap();
        assert_eq!(big.truncated(5), small);
    }

    #[test]
    fn dimension_checked() {
        let f = fit_forest(&grid_samples(false), &memorizing(), 0).unwrap();
        assert_eq!(
            f.predict(&[1.0]),
            Err(ForestError::DimensionMismatch {
                expected: 2,
                got: 1
            })
        );
        assert!(f.predict_with_contributions(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn max_features_subsampling_is_deterministic() {
        let s = grid_samples(true);
        let p = Hyperparams {
            n_estimators: 4,
            max_features: Some(1),
            ..Hyperparams::default()
        };
        let a = fit_forest(&s, &p, 2).unwrap();
        assert_eq!(a, fit_forest(&s, &p, 2).unwrap());
    }

    /// Recomputes a tree's decomposition by walking node indices directly.
    fn path_oracle(tree: &RegressionTree, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nodes = tree.nodes();
        let mut i = 0;
        let mut sum = nodes[0].value.clone();
        while let Some(s) = nodes[i].split {
            let j = if x[s.feature] <= s.threshold {
                s.left
            } else {
                s.right
            };
            for ((acc, after), before) in sum.iter_mut().zip(&nodes[j].value).zip(&nodes[i].value) {
                *acc += after - before;
            }
            i = j;
        }
        (sum, nodes[i].value.clone())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn decomposition_identity(m in 0.0f64..1500.0, p in 0.0f64..2500.0) {
            let f = fit_forest(&grid_samples(true), &Hyperparams { n_estimators: 8, ..Hyperparams::default() }, 1).unwrap();
            let d = f.predict_with_contributions(&[m, p]).unwrap();
            for o in 0..3 {
                let total = d.bias[o] + d.contributions.iter().map(|c| c[o]).sum::<f64>();
                prop_assert!((total - d.prediction[o]).abs() <= 1e-9 * d.prediction[o].abs().max(1.0));
            }
            for t in f.trees() {
                let (telescoped, leaf) = path_oracle(t, &[m, p]);
                for o in 0..3 {
                    prop_assert!((telescoped[o] - leaf[o]).abs() <= 1e-9 * leaf[o].abs().max(1.0));
                }
            }
        }

        #[test]
        fn permutation_invariance(seed in 0u64..1000) {
            let s = grid_samples(true);
            let mut idx: Vec<usize> = (0..s.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let shuffled = s.subset(&idx);
            let p = Hyperparams { n_estimators: 3, bootstrap: false, max_depth: Some(4), ..Hyperparams::default() };
            prop_assert_eq!(fit_forest(&s, &p, 0).unwrap(), fit_forest(&shuffled, &p, 0).unwrap());
        }
    }
}
