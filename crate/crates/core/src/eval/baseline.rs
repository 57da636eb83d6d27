//! Reference classifiers trained on the same rows as the boosted model.

use crate::error::{Error, Result};
use crate::gbdt::{argmax, softmax, TrainSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartConfig {
    pub max_depth: usize,
    /// Minimum rows in each child of a split.
    pub min_leaf: usize,
}

impl Default for CartConfig {
    fn default() -> Self {
        CartConfig {
            max_depth: 12,
            min_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CartNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        class: usize,
    },
}

/// A single classification tree grown by Gini impurity.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<CartNode>,
}

fn check_set(data: &TrainSet) -> Result<()> {
    if data.is_empty() || data.classes().is_empty() {
        return Err(Error::Training("baseline needs a non-empty training set".into()));
    }
    Ok(())
}

impl DecisionTree {
    pub fn fit(data: &TrainSet, config: &CartConfig) -> Result<Self> {
        check_set(data)?;
        let mut tree = DecisionTree { nodes: Vec::new() };
        let mut rows: Vec<usize> = (0..data.len()).collect();
        tree.grow(data, config, &mut rows, 0);
        Ok(tree)
    }

    fn grow(&mut self, data: &TrainSet, config: &CartConfig, rows: &mut [usize], depth: usize) -> usize {
        let k = data.classes().len();
        let mut counts = vec![0usize; k];
        for &r in rows.iter() {
            counts[data.label(r)] += 1;
        }
        let idx = self.nodes.len();
        let majority = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
        self.nodes.push(CartNode::Leaf { class: majority });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= config.max_depth || rows.len() < 2 * config.min_leaf.max(1) {
            return idx;
        }
        let Some((feature, threshold)) = best_split(data, config, rows, &counts) else {
            return idx;
        };
        rows.sort_by(|&a, &b| (data.row(a)[feature] >= threshold).cmp(&(data.row(b)[feature] >= threshold)));
        let split = rows.partition_point(|&r| data.row(r)[feature] < threshold);
        let (lo, hi) = rows.split_at_mut(split);
        let left = self.grow(data, config, lo, depth + 1);
        let right = self.grow(data, config, hi, depth + 1);
        self.nodes[idx] = CartNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        idx
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            match self.nodes[idx] {
                CartNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if x[feature] < threshold { left } else { right },
                CartNode::Leaf { class } => return class,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[CartNode], idx: usize) -> usize {
            match nodes[idx] {
                CartNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                CartNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Lowest weighted Gini impurity over all midpoint thresholds; ties keep the
/// first feature and threshold found.
fn best_split(data: &TrainSet, config: &CartConfig, rows: &[usize], counts: &[usize]) -> Option<(usize, f64)> {
    let n = rows.len();
    let total_sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = rows.to_vec();
    for f in 0..data.n_features() {
        order.sort_by(|&a, &b| data.row(a)[f].total_cmp(&data.row(b)[f]).then(a.cmp(&b)));
        let mut left = vec![0usize; counts.len()];
        let mut sq_left = 0.0;
        let mut sq_right = total_sq;
        for pos in 1..n {
            let r = order[pos - 1];
            let c = data.label(r);
            sq_left += (2 * left[c] + 1) as f64;
            sq_right -= (2 * (counts[c] - left[c]) - 1) as f64;
            left[c] += 1;
            let (lo, hi) = (data.row(r)[f], data.row(order[pos])[f]);
            if !(hi > lo) || pos < config.min_leaf || n - pos < config.min_leaf {
                continue;
            }
            let (nl, nr) = (pos as f64, (n - pos) as f64);
            // n times the weighted impurity
            let impurity = nl - sq_left / nl + nr - sq_right / nr;
            if best.is_none_or(|b| impurity < b.0) {
                let mid = 0.5 * (lo + hi);
                best = Some((impurity, f, if mid > lo { mid } else { hi }));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub step: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            iterations: 500,
            step: 0.1,
        }
    }
}

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent from zero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Per class: feature weights followed by the intercept.
    weights: Vec<Vec<f64>>,
}

impl LogisticRegression {
    pub fn fit(data: &TrainSet, config: &LogisticConfig) -> Result<Self> {
        check_set(data)?;
        let n = data.len();
        let f = data.n_features();
        let k = data.classes().len();
        let mut mean = vec![0.0; f];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(data.row(i)) {
                *m += x / n as f64;
            }
        }
        let mut scale = vec![0.0; f];
        for i in 0..n {
            for j in 0..f {
                scale[j] += (data.row(i)[j] - mean[j]).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..f).map(|j| (data.row(i)[j] - mean[j]) / scale[j]).collect();
                row.push(1.0);
                row
            })
            .collect();
        let mut model = LogisticRegression {
            mean,
            scale,
            weights: vec![vec![0.0; f + 1]; k],
        };
        for _ in 0..config.iterations {
            let mut grad = vec![vec![0.0; f + 1]; k];
            for (i, row) in z.iter().enumerate() {
                let p = softmax(&model.logits(row));
                for c in 0..k {
                    let err = p[c] - if data.label(i) == c { 1.0 } else { 0.0 };
                    for (g, x) in grad[c].iter_mut().zip(row) {
                        *g += err * x;
                    }
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                for (wj, gj) in w.iter_mut().zip(g) {
                    *wj -= config.step * gj / n as f64;
                }
            }
        }
        Ok(model)
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z: Vec<f64> = x
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        z.push(1.0);
        argmax(&self.logits(&z))
    }
}
