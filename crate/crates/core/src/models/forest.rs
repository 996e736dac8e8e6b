//! CART regression trees with variance-reduction splits, bagged into a
//! random forest. Leaves keep their label multisets so the same forest
//! answers conditional quantile queries. Split search runs over quantile
//! bins of each feature.

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Number of features tried at each split.
    pub mtry: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        mean: f64,
        /// Sorted labels of the training samples in this leaf.
        labels: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

/// Upper bound on split candidates per feature.
pub const MAX_BINS: usize = 64;

/// Training features quantized to at most [`MAX_BINS`] quantile bins per
/// column. Columns with few distinct values keep one bin per value, so
/// their splits are exact.
struct Binned {
    /// Column-major bin index of every row.
    bins: Vec<Vec<u8>>,
    /// `thresholds[f][b]` separates bin `b` from bin `b + 1` in raw units.
    thresholds: Vec<Vec<f64>>,
}

impl Binned {
    fn new(x: &Matrix) -> Binned {
        let n = x.rows();
        let mut bins = Vec::with_capacity(x.cols());
        let mut thresholds = Vec::with_capacity(x.cols());
        for f in 0..x.cols() {
            let column = x.column(f);
            let mut sorted = column.clone();
            sorted.sort_by(f64::total_cmp);
            // Group distinct values so each bin holds about n / MAX_BINS rows.
            let mut distinct: Vec<f64> = Vec::new();
            let mut group: Vec<usize> = Vec::new();
            let mut g = 0;
            for (pos, &v) in sorted.iter().enumerate() {
                if distinct.last() != Some(&v) {
                    if !distinct.is_empty() && pos * MAX_BINS >= (g + 1) * n {
                        g += 1;
                    }
                    distinct.push(v);
                    group.push(g);
                }
            }
            if distinct.len() <= MAX_BINS {
                group = (0..distinct.len()).collect();
            }
            let n_bins = group.last().map_or(1, |&b| b + 1);
            let mut lo = vec![f64::INFINITY; n_bins];
            let mut hi = vec![f64::NEG_INFINITY; n_bins];
            for (&v, &b) in distinct.iter().zip(&group) {
                lo[b] = lo[b].min(v);
                hi[b] = hi[b].max(v);
            }
            thresholds.push((0..n_bins - 1).map(|b| 0.5 * (hi[b] + lo[b + 1])).collect());
            bins.push(
                column
                    .iter()
                    .map(|v| group[distinct.partition_point(|d| d < v)] as u8)
                    .collect(),
            );
        }
        Binned { bins, thresholds }
    }
}

impl Tree {
    fn fit(binned: &Binned, y: &[f64], mut samples: Vec<usize>, config: TreeConfig, seed: u64) -> Tree {
        let mut tree = Tree { nodes: Vec::new() };
        let mut rng = seed::rng(seed);
        let features: Vec<usize> = (0..binned.bins.len()).collect();
        let mut scratch = Scratch {
            sums: vec![0.0; MAX_BINS],
            counts: vec![0; MAX_BINS],
            pairs: Vec::with_capacity(MAX_BINS),
        };
        tree.grow(binned, y, &mut samples, 0, config, &features, &mut rng, &mut scratch);
        tree
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        &mut self,
        binned: &Binned,
        y: &[f64],
        samples: &mut [usize],
        depth: usize,
        config: TreeConfig,
        features: &[usize],
        rng: &mut impl Rng,
        scratch: &mut Scratch,
    ) -> usize {
        let id = self.nodes.len();
        let split = if depth < config.max_depth && samples.len() >= 2 * config.min_leaf.max(1) {
            best_split(binned, y, samples, config, features, rng, scratch)
        } else {
            None
        };
        match split {
            Some((feature, bin)) => {
                self.nodes.push(Node::Leaf {
                    mean: 0.0,
                    labels: Vec::new(),
                });
                let column = &binned.bins[feature];
                let mid = partition_stable(samples, |i| column[i] as usize <= bin, &mut scratch.pairs);
                let (l, r) = samples.split_at_mut(mid);
                let left = self.grow(binned, y, l, depth + 1, config, features, rng, scratch);
                let right = self.grow(binned, y, r, depth + 1, config, features, rng, scratch);
                self.nodes[id] = Node::Split {
                    feature,
                    threshold: binned.thresholds[feature][bin],
                    left,
                    right,
                };
            }
            None => {
                let mut labels: Vec<f64> = samples.iter().map(|&i| y[i]).collect();
                labels.sort_by(f64::total_cmp);
                let mean = labels.iter().sum::<f64>() / labels.len() as f64;
                self.nodes.push(Node::Leaf { mean, labels });
            }
        }
        id
    }

    fn leaf(&self, x: &[f64]) -> (f64, &[f64]) {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { mean, labels } => return (*mean, labels),
            }
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.leaf(x).0
    }
}

struct Scratch {
    sums: Vec<f64>,
    counts: Vec<usize>,
    /// (bin, row) pairs for small nodes; also the partition buffer.
    pairs: Vec<(u8, usize)>,
}

/// Moves rows satisfying `left` to the front, keeping relative order on both
/// sides. Returns the number of such rows.
fn partition_stable(rows: &mut [usize], left: impl Fn(usize) -> bool, buf: &mut Vec<(u8, usize)>) -> usize {
    buf.clear();
    let mut k = 0;
    for j in 0..rows.len() {
        let i = rows[j];
        if left(i) {
            rows[k] = i;
            k += 1;
        } else {
            buf.push((0, i));
        }
    }
    for (slot, &(_, i)) in rows[k..].iter_mut().zip(buf.iter()) {
        *slot = i;
    }
    k
}

/// Best (feature, last bin of the left child) by variance reduction.
fn best_split(
    binned: &Binned,
    y: &[f64],
    samples: &[usize],
    config: TreeConfig,
    features: &[usize],
    rng: &mut impl Rng,
    scratch: &mut Scratch,
) -> Option<(usize, usize)> {
    let n = samples.len();
    let total: f64 = samples.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = samples.iter().map(|&i| y[i] * y[i]).sum();
    let parent_sse = total_sq - total * total / n as f64;
    if parent_sse <= 1e-14 * (1.0 + total_sq) {
        return None;
    }
    let min_leaf = config.min_leaf.max(1);
    let mut best: Option<(f64, usize, usize)> = None;
    for &feature in features.choose_multiple(rng, config.mtry.clamp(1, features.len())) {
        let n_bins = binned.thresholds[feature].len() + 1;
        let column = &binned.bins[feature];
        let mut consider = |left_sum: f64, n_left: usize, b: usize| {
            if n_left < min_leaf || n - n_left < min_leaf || n_left == n {
                return;
            }
            let right_sum = total - left_sum;
            // Maximizing this is equivalent to minimizing child SSE.
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64;
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, feature, b));
            }
        };
        if 2 * n <= n_bins {
            // Few rows: walk the occupied bins in order instead of all of them.
            let pairs = &mut scratch.pairs;
            pairs.clear();
            pairs.extend(samples.iter().map(|&i| (column[i], i)));
            pairs.sort_by_key(|p| p.0);
            let (mut left_sum, mut k) = (0.0, 0);
            while k < pairs.len() {
                let b = pairs[k].0;
                let mut bin_sum = 0.0;
                while k < pairs.len() && pairs[k].0 == b {
                    bin_sum += y[pairs[k].1];
                    k += 1;
                }
                if k == pairs.len() {
                    break;
                }
                left_sum += bin_sum;
                consider(left_sum, k, b as usize);
            }
        } else {
            let (sums, counts) = (&mut scratch.sums[..n_bins], &mut scratch.counts[..n_bins]);
            sums.fill(0.0);
            counts.fill(0);
            for &i in samples.iter() {
                let b = column[i] as usize;
                sums[b] += y[i];
                counts[b] += 1;
            }
            let mut left_sum = 0.0;
            let mut n_left = 0;
            for b in 0..n_bins - 1 {
                if counts[b] == 0 {
                    continue;
                }
                left_sum += sums[b];
                n_left += counts[b];
                if n_left == n {
                    break;
                }
                consider(left_sum, n_left, b);
            }
        }
    }
    best.filter(|(g, _, _)| *g - total * total / n as f64 > 1e-14 * (1.0 + total_sq))
        .map(|(_, f, b)| (f, b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
}

impl Forest {
    pub fn fit(x: &Matrix, y: &[f64], n_trees: usize, config: TreeConfig, bootstrap: bool, seed: u64) -> Forest {
        let n = y.len();
        let binned = Binned::new(x);
        let trees = (0..n_trees.max(1))
            .into_par_iter()
            .map(|t| {
                let tree_seed = seed::derive_seed(seed, t as u64);
                let samples = if bootstrap {
                    let mut rng = seed::rng(seed::derive_seed(tree_seed, u64::MAX));
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                Tree::fit(&binned, y, samples, config, tree_seed)
            })
            .collect();
        Forest { trees }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.iter_rows().map(|r| self.predict_row(r)).collect()
    }

    /// Weighted quantiles of the pooled leaf labels, each tree carrying equal mass.
    pub fn quantiles_row(&self, x: &[f64], levels: &[f64]) -> Vec<f64> {
        let mut pooled: Vec<(f64, f64)> = Vec::new();
        for tree in &self.trees {
            let (_, labels) = tree.leaf(x);
            let w = 1.0 / labels.len() as f64;
            pooled.extend(labels.iter().map(|&v| (v, w)));
        }
        let total: f64 = pooled.iter().map(|p| p.1).sum();
        levels
            .iter()
            .map(|&tau| weighted_quantile(&mut pooled, tau * total - 1e-12 * total))
            .collect()
    }
}

/// Smallest value whose cumulative weight (in sorted order) reaches `target`,
/// found by quickselect.
fn weighted_quantile(items: &mut [(f64, f64)], mut target: f64) -> f64 {
    let mut slice = items;
    loop {
        if slice.len() == 1 {
            return slice[0].0;
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0));
        let below: f64 = slice[..mid].iter().map(|p| p.1).sum();
        if below >= target {
            slice = &mut slice[..mid];
        } else if below + slice[mid].1 >= target {
            return slice[mid].0;
        } else {
            target -= below + slice[mid].1;
            slice = &mut slice[mid + 1..];
            if slice.is_empty() {
                unreachable!("target beyond total weight");
            }
        }
    }
}
