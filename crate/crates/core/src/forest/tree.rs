//! Multi-output CART regression tree.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForestError, Hyperparams, Samples};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    #[serde(rename = "f")]
    pub feature: usize,
    #[serde(rename = "t")]
    pub threshold: f64,
    #[serde(rename = "l")]
    pub left: usize,
    #[serde(rename = "r")]
    pub right: usize,
}

/// A tree node. Internal nodes keep the mean target of their region as well,
/// which the contribution decomposition needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    #[serde(rename = "v")]
    pub value: Vec<f64>,
    #[serde(rename = "n")]
    pub n_samples: usize,
    #[serde(rename = "s", default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Binary regression tree; `x[feature] <= threshold` goes left. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    n_features: usize,
    n_outputs: usize,
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i].split {
                Some(s) => 1 + go(nodes, s.left).max(go(nodes, s.right)),
                None => 0,
            }
        }
        go(&self.nodes, 0)
    }

    /// Mean training target at the root.
    pub fn bias(&self) -> &[f64] {
        &self.nodes[0].value
    }

    /// Index of the leaf whose region contains `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        while let Some(s) = self.nodes[i].split {
            i = if x[s.feature] <= s.threshold {
                s.left
            } else {
                s.right
            };
        }
        i
    }

    pub fn predict(&self, x: &[f64]) -> Result<&[f64], ForestError> {
        self.check(x)?;
        Ok(&self.nodes[self.leaf_index(x)].value)
    }

    /// Adds this tree's per-feature contributions along the path of `x` into
    /// `contrib` (row-major `n_features x n_outputs`).
    pub(crate) fn accumulate_contributions(&self, x: &[f64], contrib: &mut [f64]) {
        let no = self.n_outputs;
        let mut i = 0;
        while let Some(s) = self.nodes[i].split {
            let next = if x[s.feature] <= s.threshold {
                s.left
            } else {
                s.right
            };
            let (parent, child) = (&self.nodes[i].value, &self.nodes[next].value);
            for o in 0..no {
                contrib[s.feature * no + o] += child[o] - parent[o];
            }
            i = next;
        }
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

    pub(crate) fn validate_structure(&self) -> Result<(), ForestError> {
        let corrupt = |m: &str| Err(ForestError::CorruptModel(m.to_string()));
        if self.nodes.is_empty() {
            return corrupt("tree without nodes");
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.value.len() != self.n_outputs {
                return corrupt("node value has wrong output count");
            }
            if let Some(s) = n.split {
                if s.feature >= self.n_features
                    || s.left <= i
                    || s.right <= i
                    || s.left >= self.nodes.len()
                    || s.right >= self.nodes.len()
                {
                    return corrupt("split references an invalid feature or child");
                }
            }
        }
        Ok(())
    }
}

/// Fits one tree on every row of `samples`.
pub fn fit_tree(
    samples: &Samples,
    params: &Hyperparams,
    rng: &mut ChaCha8Rng,
) -> Result<RegressionTree, ForestError> {
    if samples.is_empty() {
        return Err(ForestError::EmptySamples);
    }
    params.validate()?;
    let rows: Vec<usize> = (0..samples.len()).collect();
    Ok(grow(samples, &rows, params, rng))
}

struct Best {
    impurity: f64,
    feature: usize,
    threshold: f64,
    n_left: usize,
}

/// Greedy growth over `rows` (indices into `samples`, repeats allowed).
///
/// Every feature keeps its own ordering of the node's slots; children are
/// carved out by stable partitioning, so no node re-sorts. Slot order within
/// equal feature values follows the row index, which makes the result
/// independent of how rows happen to be arranged in a canonicalized dataset.
pub(crate) fn grow(
    samples: &Samples,
    rows: &[usize],
    params: &Hyperparams,
    rng: &mut ChaCha8Rng,
) -> RegressionTree {
    let n = rows.len();
    let nf = samples.n_features();
    let no = samples.n_outputs();

    let mut root_mean = vec![0.0; no];
    for &r in rows {
        for (o, m) in root_mean.iter_mut().enumerate() {
            *m += samples.target(r)[o];
        }
    }
    for m in &mut root_mean {
        *m /= n as f64;
    }
    // Centered targets keep the running sums of squares well conditioned.
    let mut yc = vec![0.0; n * no];
    for (slot, &r) in rows.iter().enumerate() {
        for o in 0..no {
            yc[slot * no + o] = samples.target(r)[o] - root_mean[o];
        }
    }
    let weights: Vec<f64> = (0..no)
        .map(|o| {
            let var = (0..n).map(|s| yc[s * no + o].powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 {
                1.0 / var
            } else {
                0.0
            }
        })
        .collect();

    let xs: Vec<Vec<f64>> = (0..nf)
        .map(|f| rows.iter().map(|&r| samples.features(r)[f]).collect())
        .collect();
    let mut orders: Vec<Vec<u32>> = (0..nf)
        .map(|f| {
            let mut o: Vec<u32> = (0..n as u32).collect();
            o.sort_by(|&a, &b| {
                xs[f][a as usize]
                    .total_cmp(&xs[f][b as usize])
                    .then(rows[a as usize].cmp(&rows[b as usize]))
                    .then(a.cmp(&b))
            });
            o
        })
        .collect();

    let max_features = params.max_features.unwrap_or(nf).clamp(1, nf);
    let max_depth = params.max_depth.unwrap_or(usize::MAX);
    let mut nodes: Vec<Node> = Vec::new();
    let mut goes_left = vec![false; n];
    let mut scratch: Vec<u32> = Vec::with_capacity(n);
    let mut left_sum = vec![0.0; no];
    let mut left_sq = vec![0.0; no];
    let mut total_sum = vec![0.0; no];
    let mut total_sq = vec![0.0; no];

    // (node index, start, end, depth); nodes are created before being expanded.
    let mut stack = vec![(0usize, 0usize, n, 0usize)];
    nodes.push(Node {
        value: Vec::new(),
        n_samples: n,
        split: None,
    });

    while let Some((id, start, end, depth)) = stack.pop() {
        let count = end - start;
        let span = &orders[0][start..end];

        let mut value = vec![0.0; no];
        for &slot in span {
            let t = samples.target(rows[slot as usize]);
            for o in 0..no {
                value[o] += t[o];
            }
        }
        for v in &mut value {
            *v /= count as f64;
        }
        let first = samples.target(rows[span[0] as usize]);
        let pure = span.iter().all(|&s| {
            samples
                .target(rows[s as usize])
                .iter()
                .zip(first)
                .all(|(a, b)| a == b)
        });
        nodes[id].value = value;

        if pure
            || depth >= max_depth
            || count < params.min_samples_split
            || count < 2 * params.min_samples_leaf
        {
            continue;
        }

        let features: Vec<usize> = if max_features >= nf {
            (0..nf).collect()
        } else {
            let mut f = sample(rng, nf, max_features).into_vec();
            f.sort_unstable();
            f
        };

        total_sum.iter_mut().for_each(|v| *v = 0.0);
        total_sq.iter_mut().for_each(|v| *v = 0.0);
        for &slot in span {
            for o in 0..no {
                let y = yc[slot as usize * no + o];
                total_sum[o] += y;
                total_sq[o] += y * y;
            }
        }

        let mut best: Option<Best> = None;
        let min_leaf = params.min_samples_leaf;
        for &f in &features {
            let order = &orders[f][start..end];
            let xf = &xs[f];
            left_sum.iter_mut().for_each(|v| *v = 0.0);
            left_sq.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..count - 1 {
                let slot = order[i] as usize;
                for o in 0..no {
                    let y = yc[slot * no + o];
                    left_sum[o] += y;
                    left_sq[o] += y * y;
                }
                let nl = i + 1;
                let nr = count - nl;
                if nl < min_leaf {
                    continue;
                }
                if nr < min_leaf {
                    break;
                }
                let (a, b) = (xf[slot], xf[order[i + 1] as usize]);
                if a >= b {
                    continue;
                }
                let mut impurity = 0.0;
                for o in 0..no {
                    if weights[o] == 0.0 {
                        continue;
                    }
                    let rs = total_sum[o] - left_sum[o];
                    let rq = total_sq[o] - left_sq[o];
                    let sse = (left_sq[o] - left_sum[o] * left_sum[o] / nl as f64)
                        + (rq - rs * rs / nr as f64);
                    impurity += weights[o] * sse;
                }
                if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid < b { mid } else { a };
                    best = Some(Best {
                        impurity,
                        feature: f,
                        threshold,
                        n_left: nl,
                    });
                }
            }
        }

        let Some(best) = best else { continue };

        for &slot in &orders[best.feature][start..start + best.n_left] {
            goes_left[slot as usize] = true;
        }
        for order in orders.iter_mut() {
            scratch.clear();
            let span = &mut order[start..end];
            let mut w = 0;
            for i in 0..span.len() {
                let s = span[i];
                if goes_left[s as usize] {
                    span[w] = s;
                    w += 1;
                } else {
                    scratch.push(s);
                }
            }
            span[w..].copy_from_slice(&scratch);
        }
        for &slot in &orders[best.feature][start..start + best.n_left] {
            goes_left[slot as usize] = false;
        }

        let left = nodes.len();
        let right = left + 1;
        nodes.push(Node {
            value: Vec::new(),
            n_samples: best.n_left,
            split: None,
        });
        nodes.push(Node {
            value: Vec::new(),
            n_samples: count - best.n_left,
            split: None,
        });
        nodes[id].split = Some(Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        });
        let mid = start + best.n_left;
        stack.push((right, mid, end, depth + 1));
        stack.push((left, start, mid, depth + 1));
    }

    RegressionTree {
        n_features: nf,
        n_outputs: no,
        nodes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn samples(rows: &[(&[f64], &[f64])]) -> Samples {
        let mut s = Samples::new(rows[0].0.len(), rows[0].1.len());
        for (x, y) in rows {
            s.push(x, y).unwrap();
        }
        s
    }

    fn unlimited() -> Hyperparams {
        Hyperparams {
            n_estimators: 1,
            bootstrap: false,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn single_sample_is_a_leaf() {
        let s = samples(&[(&[1.0, 2.0], &[5.0, 6.0])]);
        let t = fit_tree(&s, &unlimited(), &mut rng()).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.predict(&[9.0, 9.0]).unwrap(), &[5.0, 6.0]);
    }

    #[test]
    fn identical_features_give_mean_leaf() {
        let s = samples(&[(&[1.0], &[1.0]), (&[1.0], &[2.0]), (&[1.0], &[6.0])]);
        let t = fit_tree(&s, &unlimited(), &mut rng()).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.predict(&[1.0]).unwrap(), &[3.0]);
    }

    #[test]
    fn four_points_are_memorized() {
        let s = samples(&[
            (&[1.0], &[1.0]),
            (&[2.0], &[2.0]),
            (&[3.0], &[3.0]),
            (&[4.0], &[4.0]),
        ]);
        let t = fit_tree(&s, &unlimited(), &mut rng()).unwrap();
        for x in 1..=4 {
            assert_eq!(t.predict(&[x as f64]).unwrap(), &[x as f64]);
        }
        assert_eq!(t.n_leaves(), 4);
        // The first split halves the set: {1,2} vs {3,4} has the lowest SSE.
        assert_eq!(t.nodes()[0].split.unwrap().threshold, 2.5);
    }

    #[test]
    fn empty_is_an_error() {
        let s = Samples::new(1, 1);
        assert!(matches!(
            fit_tree(&s, &unlimited(), &mut rng()),
            Err(ForestError::EmptySamples)
        ));
    }

    #[test]
    fn stopping_rules() {
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..16)
            .map(|i| (vec![i as f64], vec![(i * i) as f64]))
            .collect();
        let mut s = Samples::new(1, 1);
        for (x, y) in &rows {
            s.push(x, y).unwrap();
        }
        let depth2 = Hyperparams {
            max_depth: Some(2),
            ..unlimited()
        };
        assert_eq!(fit_tree(&s, &depth2, &mut rng()).unwrap().depth(), 2);

        let leaf4 = Hyperparams {
            min_samples_leaf: 4,
            ..unlimited()
        };
        let t = fit_tree(&s, &leaf4, &mut rng()).unwrap();
        assert!(t
            .nodes()
            .iter()
            .filter(|n| n.split.is_none())
            .all(|n| n.n_samples >= 4));

        let split17 = Hyperparams {
            min_samples_split: 17,
            ..unlimited()
        };
        assert_eq!(fit_tree(&s, &split17, &mut rng()).unwrap().nodes().len(), 1);
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // Both features separate the targets perfectly.
        let s = samples(&[(&[0.0, 0.0], &[0.0]), (&[1.0, 1.0], &[1.0])]);
        let t = fit_tree(&s, &unlimited(), &mut rng()).unwrap();
        assert_eq!(t.nodes()[0].split.unwrap().feature, 0);
    }

    #[test]
    fn normalization_balances_outputs() {
        // Output 0 is split best by feature 1, output 1 by feature 0. Output 0
        // has a huge scale; without normalization feature 1 would always win.
        let mut s = Samples::new(2, 2);
        let data = [
            ([0.0, 0.0], [0.0, 0.0]),
            ([0.0, 1.0], [1000.0, 0.0]),
            ([1.0, 0.0], [0.0, 1.0]),
            ([1.0, 1.0], [1000.0, 1.0]),
        ];
        for (x, y) in &data {
            s.push(x, y).unwrap();
        }
        let t = fit_tree(
            &s,
            &Hyperparams {
                max_depth: Some(1),
                ..unlimited()
            },
            &mut rng(),
        )
        .unwrap();
        // Equal normalized gains, so the lower feature index wins the tie.
        assert_eq!(t.nodes()[0].split.unwrap().feature, 0);
    }
}
