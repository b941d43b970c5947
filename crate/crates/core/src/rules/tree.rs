//! Regression trees and random forests, built from scratch.
//!
//! Trees split greedily on mean squared error over all features, with
//! thresholds at midpoints between consecutive distinct sorted values and
//! ties routed to the left branch. Nodes are expanded until leaves are pure
//! (or a configured depth/leaf-size bound is hit). The forest averages
//! trees fitted on bootstrap resamples of the training rows; everything is
//! deterministic given the seed.
//!
//! The implementation is generic over the feature dimension so it serves
//! both lottery prediction (3 features) and the sample-feature regressions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            bootstrap: true,
            max_depth: None,
            min_leaf: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// A single regression tree stored as a node arena (root at index 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    // ties go left
                    idx = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
}

struct TreeBuilder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [f64],
    max_depth: Option<usize>,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl<'a> TreeBuilder<'a> {
    /// Best (feature, threshold, sse) split of `rows`, or None if every
    /// feature is constant on them.
    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64, f64)> {
        let dim = self.xs[rows[0]].len();
        let total: f64 = rows.iter().map(|&i| self.ys[i]).sum();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = rows.to_vec();
        for feature in 0..dim {
            order.sort_by(|&a, &b| {
                self.xs[a][feature]
                    .partial_cmp(&self.xs[b][feature])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            let total_sq: f64 = rows.iter().map(|&i| self.ys[i] * self.ys[i]).sum();
            for k in 0..order.len() - 1 {
                let i = order[k];
                left_sum += self.ys[i];
                left_sq += self.ys[i] * self.ys[i];
                let a = self.xs[order[k]][feature];
                let b = self.xs[order[k + 1]][feature];
                if a == b {
                    continue;
                }
                let n_left = (k + 1) as f64;
                let n_right = (order.len() - k - 1) as f64;
                if (k + 1) < self.min_leaf || (order.len() - k - 1) < self.min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let right_sq = total_sq - left_sq;
                let sse = (left_sq - left_sum * left_sum / n_left)
                    + (right_sq - right_sum * right_sum / n_right);
                let threshold = 0.5 * (a + b);
                match best {
                    Some((_, _, best_sse)) if sse >= best_sse => {}
                    _ => best = Some((feature, threshold, sse)),
                }
            }
        }
        best
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let mean = rows.iter().map(|&i| self.ys[i]).sum::<f64>() / rows.len() as f64;
        let pure = rows.iter().all(|&i| self.ys[i] == self.ys[rows[0]]);
        let depth_ok = self.max_depth.is_none_or(|d| depth < d);
        if pure || !depth_ok || rows.len() < 2 * self.min_leaf.max(1) {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        }
        let Some((feature, threshold, _)) = self.best_split(rows) else {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.xs[i][feature] <= threshold);
        let idx = self.nodes.len();
        self.nodes.push(Node::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.build(&left_rows, depth + 1);
        let right = self.build(&right_rows, depth + 1);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[idx]
        {
            *l = left;
            *r = right;
        }
        idx
    }
}

/// Fits a single regression tree on the given rows.
pub fn fit_tree(
    xs: &[Vec<f64>],
    ys: &[f64],
    max_depth: Option<usize>,
    min_leaf: usize,
) -> RegressionTree {
    assert!(!xs.is_empty(), "tree fit needs at least one row");
    assert_eq!(xs.len(), ys.len());
    let mut builder = TreeBuilder {
        xs,
        ys,
        max_depth,
        min_leaf: min_leaf.max(1),
        nodes: Vec::new(),
    };
    let rows: Vec<usize> = (0..xs.len()).collect();
    // build() appends depth-first with root first
    let root = builder.build(&rows, 0);
    debug_assert_eq!(root, 0);
    RegressionTree {
        nodes: builder.nodes,
    }
}

/// A forest of regression trees; prediction is the mean of tree outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
    pub config: ForestConfig,
}

impl Forest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }
}

/// Fits a forest: `n_trees` trees on bootstrap resamples of the rows
/// (resample size equals the training size). Per-tree randomness comes
/// from independent ChaCha streams keyed by (seed, tree index).
pub fn fit_forest(xs: &[Vec<f64>], ys: &[f64], config: &ForestConfig) -> Forest {
    assert!(!xs.is_empty(), "forest fit needs at least one row");
    let n = xs.len();
    let trees: Vec<RegressionTree> = (0..config.n_trees.max(1))
        .map(|tree_idx| {
            if config.bootstrap {
                let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
                rng.set_stream(tree_idx as u64);
                let mut bx = Vec::with_capacity(n);
                let mut by = Vec::with_capacity(n);
                for _ in 0..n {
                    let i = rng.random_range(0..n);
                    bx.push(xs[i].clone());
                    by.push(ys[i]);
                }
                fit_tree(&bx, &by, config.max_depth, config.min_leaf)
            } else {
                fit_tree(xs, ys, config.max_depth, config.min_leaf)
            }
        })
        .collect();
    Forest {
        trees,
        config: config.clone(),
    }
}
