//! Multi-class gradient-boosted decision trees.
//!
//! Softmax boosting with second-order statistics: every round computes, for
//! each class, gradients `p - y` and hessians `p (1 - p)` at the current
//! probabilities and fits one regression tree to them. Splits are found by
//! exact greedy search over the midpoints between consecutive distinct feature
//! values, maximizing
//!
//! ```text
//! gain = 1/2 [ G_L^2 / (H_L + lambda) + G_R^2 / (H_R + lambda) - G^2 / (H + lambda) ]
//! ```
//!
//! and leaves take the L1 soft-thresholded Newton step
//! `-sign(G) max(0, |G| - alpha) / (H + lambda)`, shrunk by the learning rate.
//!
//! Trees grow level by level. Each level costs one pass over the presorted
//! rows of every feature, independent of how many nodes the level holds.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, FEATURE_COUNT, FEATURE_NAMES};

pub const MODEL_VERSION: u32 = 1;

/// Smallest gain for which a split is kept.
const MIN_SPLIT_GAIN: f64 = 1e-12;
/// Hessian floor for rows whose probability has saturated.
const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    /// Boosting rounds (estimators); each round adds one tree per class.
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L1 penalty on leaf weights.
    pub alpha: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum hessian mass in each child of a split.
    pub min_child_weight: f64,
    pub base_score: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            rounds: 150,
            max_depth: 8,
            learning_rate: 0.046,
            alpha: 10.0,
            lambda: 1.0,
            min_child_weight: 1.0,
            base_score: 0.0,
            seed: 42,
        }
    }
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

/// Row-major feature matrix with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    feature_names: Vec<String>,
    classes: Vec<String>,
    values: Vec<f64>,
    labels: Vec<usize>,
    weights: Option<Vec<f64>>,
}

impl TrainSet {
    pub fn new(feature_names: Vec<String>, classes: Vec<String>) -> Self {
        TrainSet {
            feature_names,
            classes,
            values: Vec::new(),
            labels: Vec::new(),
            weights: None,
        }
    }

    /// Builds a set over the eight Fourier features. Classes are the sorted
    /// distinct labels.
    pub fn from_features(rows: &[(FeatureVector, String)]) -> Self {
        let mut classes: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        classes.sort();
        classes.dedup();
        let mut set = TrainSet::new(
            FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            classes,
        );
        for (f, label) in rows {
            let c = set.class_index(label).expect("label collected above");
            set.push(&f.0, c);
        }
        set
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        assert_eq!(row.len(), self.n_features(), "row width");
        assert!(label < self.classes.len(), "label out of range");
        self.values.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.len());
        self.weights = Some(weights);
        self
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.n_features();
        &self.values[i * f..(i + 1) * f]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.n_features() == 0 {
            return Err(Error::Training("training set has no classes or features".into()));
        }
        let mut present = vec![false; self.classes.len()];
        for &l in &self.labels {
            present[l] = true;
        }
        let distinct = present.iter().filter(|&&p| p).count();
        if distinct < 2 {
            return Err(Error::Training(format!(
                "need at least 2 classes present, found {distinct}"
            )));
        }
        if self.len() < 10 {
            return Err(Error::Training(format!(
                "need at least 10 rows, got {}",
                self.len()
            )));
        }
        for i in 0..self.len() {
            if let Some(j) = self.row(i).iter().position(|x| !x.is_finite()) {
                return Err(Error::Data {
                    row: i,
                    message: format!("feature `{}` is not finite", self.feature_names[j]),
                });
            }
            let w = self.weight(i);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Data {
                    row: i,
                    message: format!("weight {w} is not a finite non-negative number"),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
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

/// Gradient statistics recorded while growing a node. Only trees trained in
/// this process carry them; they are not part of the model file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeStats {
    pub grad: f64,
    pub hess: f64,
    /// Split gain; zero for leaves.
    pub gain: f64,
}

/// A binary regression tree stored as a node array rooted at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    stats: Vec<NodeStats>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
            stats: Vec::new(),
        }
    }

    /// A single split on `feature`: `below` for `x < threshold`, else `above`.
    pub fn stump(feature: usize, threshold: f64, below: f64, above: f64) -> Self {
        Tree {
            nodes: vec![
                Node::Split {
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: below },
                Node::Leaf { value: above },
            ],
            stats: Vec::new(),
        }
    }

    /// Validates and wraps a node array. Children must come after their parent.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Model("tree has no nodes".into()));
        }
        let mut parents = vec![0usize; nodes.len()];
        for (idx, node) in nodes.iter().enumerate() {
            match *node {
                Node::Split {
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    if !threshold.is_finite() {
                        return Err(Error::Model(format!("node {idx}: non-finite threshold")));
                    }
                    for child in [left, right] {
                        if child <= idx || child >= nodes.len() {
                            return Err(Error::Model(format!(
                                "node {idx}: invalid child id {child}"
                            )));
                        }
                        parents[child] += 1;
                    }
                }
                Node::Leaf { value } => {
                    if !value.is_finite() {
                        return Err(Error::Model(format!("node {idx}: non-finite leaf")));
                    }
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(Error::Model("node array is not a tree".into()));
        }
        Ok(Tree {
            nodes,
            stats: Vec::new(),
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn stats(&self) -> &[NodeStats] {
        &self.stats
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            match self.nodes[idx] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if x[feature] < threshold { left } else { right },
                Node::Leaf { .. } => return idx,
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize) -> usize {
            match nodes[idx] {
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    /// Features used by at least one split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    classes: Vec<String>,
    feature_names: Vec<String>,
    eta: f64,
    max_depth: usize,
    alpha: f64,
    lambda: f64,
    base_score: f64,
    seed: u64,
    /// Round-major: tree `r * K + c` is round `r`, class `c`.
    trees: Vec<Tree>,
}

/// Per-round training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Multi-class log-loss on the training set after each round.
    pub loss: Vec<f64>,
}

impl GbdtModel {
    /// Assembles a model from round-major trees.
    pub fn from_trees(
        classes: Vec<String>,
        feature_names: Vec<String>,
        config: &GbdtConfig,
        trees: Vec<Tree>,
    ) -> Result<Self> {
        let k = classes.len();
        if k == 0 || trees.len() % k != 0 {
            return Err(Error::Model(format!(
                "{} trees do not fill whole rounds of {k} classes",
                trees.len()
            )));
        }
        for (i, t) in trees.iter().enumerate() {
            for n in t.nodes() {
                if let Node::Split { feature, .. } = n {
                    if *feature >= feature_names.len() {
                        return Err(Error::Model(format!(
                            "tree {i} splits on feature {feature} of {}",
                            feature_names.len()
                        )));
                    }
                }
            }
            if t.depth() > config.max_depth {
                return Err(Error::Model(format!(
                    "tree {i} is deeper than max_depth {}",
                    config.max_depth
                )));
            }
        }
        Ok(GbdtModel {
            classes,
            feature_names,
            eta: config.learning_rate,
            max_depth: config.max_depth,
            alpha: config.alpha,
            lambda: config.lambda,
            base_score: config.base_score,
            seed: config.seed,
            trees,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn rounds(&self) -> usize {
        self.trees.len() / self.classes.len()
    }

    pub fn base_score(&self) -> f64 {
        self.base_score
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn tree(&self, round: usize, class: usize) -> &Tree {
        &self.trees[round * self.n_classes() + class]
    }

    /// Trees contributing to one class, in round order.
    pub fn class_trees(&self, class: usize) -> impl Iterator<Item = &Tree> {
        self.trees.iter().skip(class).step_by(self.n_classes())
    }

    pub fn config(&self) -> GbdtConfig {
        GbdtConfig {
            rounds: self.rounds(),
            max_depth: self.max_depth,
            learning_rate: self.eta,
            alpha: self.alpha,
            lambda: self.lambda,
            base_score: self.base_score,
            seed: self.seed,
            ..GbdtConfig::default()
        }
    }

    /// Raw score of one class; no input validation.
    pub fn class_score(&self, x: &[f64], class: usize) -> f64 {
        self.base_score + self.class_trees(class).map(|t| t.predict(x)).sum::<f64>()
    }

    /// Raw scores of every class; no input validation.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let k = self.n_classes();
        let mut s = vec![self.base_score; k];
        for (i, t) in self.trees.iter().enumerate() {
            s[i % k] += t.predict(x);
        }
        s
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::Domain(format!(
                "expected {} features, got {}",
                self.n_features(),
                x.len()
            )));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "feature `{}` is not finite",
                self.feature_names[j]
            )));
        }
        Ok(())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(softmax(&self.scores(x)))
    }

    /// Index of the most probable class (lowest index on ties).
    pub fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub fn train(data: &TrainSet, config: &GbdtConfig) -> Result<GbdtModel> {
    train_with_report(data, config).map(|(m, _)| m)
}

pub fn train_with_report(data: &TrainSet, config: &GbdtConfig) -> Result<(GbdtModel, TrainReport)> {
    data.validate()?;
    if config.rounds == 0 || !(config.learning_rate > 0.0) || config.lambda < 0.0 || config.alpha < 0.0
    {
        return Err(Error::Training(
            "rounds and learning rate must be positive, alpha and lambda non-negative".into(),
        ));
    }
    let n = data.len();
    let k = data.classes().len();
    let sorted = presort(data);
    let builder = TreeBuilder {
        data,
        sorted: &sorted,
        config,
    };

    let mut scores = vec![config.base_score; n * k];
    let mut trees = Vec::with_capacity(config.rounds * k);
    let mut loss = Vec::with_capacity(config.rounds);
    let mut probs = vec![0.0; n * k];

    for _ in 0..config.rounds {
        for i in 0..n {
            let p = softmax(&scores[i * k..(i + 1) * k]);
            probs[i * k..(i + 1) * k].copy_from_slice(&p);
        }
        let round: Vec<(Tree, Vec<f64>)> = (0..k)
            .into_par_iter()
            .map(|c| {
                let mut grad = Vec::with_capacity(n);
                let mut hess = Vec::with_capacity(n);
                for i in 0..n {
                    let p = probs[i * k + c];
                    let y = if data.label(i) == c { 1.0 } else { 0.0 };
                    let w = data.weight(i);
                    grad.push((p - y) * w);
                    hess.push((p * (1.0 - p)).max(MIN_HESSIAN) * w);
                }
                builder.build(&grad, &hess)
            })
            .collect();
        for (c, (tree, outputs)) in round.into_iter().enumerate() {
            for (i, o) in outputs.iter().enumerate() {
                scores[i * k + c] += o;
            }
            trees.push(tree);
        }
        loss.push(log_loss(&scores, data));
    }

    let model = GbdtModel::from_trees(
        data.classes().to_vec(),
        data.feature_names().to_vec(),
        config,
        trees,
    )?;
    Ok((model, TrainReport { loss }))
}

fn log_loss(scores: &[f64], data: &TrainSet) -> f64 {
    let k = data.classes().len();
    let mut total = 0.0;
    let mut weight = 0.0;
    for i in 0..data.len() {
        let s = &scores[i * k..(i + 1) * k];
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let w = data.weight(i);
        total += w * (lse - s[data.label(i)]);
        weight += w;
    }
    total / weight
}

/// Row indices sorted by value, one list per feature.
fn presort(data: &TrainSet) -> Vec<Vec<u32>> {
    (0..data.n_features())
        .map(|f| {
            let mut idx: Vec<u32> = (0..data.len() as u32).collect();
            idx.sort_by(|&a, &b| {
                data.row(a as usize)[f]
                    .total_cmp(&data.row(b as usize)[f])
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

struct TreeBuilder<'a> {
    data: &'a TrainSet,
    sorted: &'a [Vec<u32>],
    config: &'a GbdtConfig,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    left_grad: f64,
    left_hess: f64,
}

#[derive(Clone, Copy)]
struct Scan {
    grad: f64,
    hess: f64,
    last: f64,
    seen: bool,
}

const NO_SLOT: usize = usize::MAX;

impl TreeBuilder<'_> {
    fn gain(&self, gl: f64, hl: f64, gr: f64, hr: f64) -> f64 {
        let lambda = self.config.lambda;
        let g = gl + gr;
        let h = hl + hr;
        0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda))
    }

    fn leaf_weight(&self, g: f64, h: f64) -> f64 {
        let shrunk = (g.abs() - self.config.alpha).max(0.0);
        -g.signum() * shrunk / (h + self.config.lambda) * self.config.learning_rate
    }

    /// Grows one tree; returns it with the leaf value of every training row.
    fn build(&self, grad: &[f64], hess: &[f64]) -> (Tree, Vec<f64>) {
        let n = grad.len();
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let mut stats = vec![NodeStats {
            grad: grad.iter().sum(),
            hess: hess.iter().sum(),
            gain: 0.0,
        }];
        let mut position = vec![0usize; n];
        let mut frontier = vec![0usize];

        for _depth in 0..self.config.max_depth {
            if frontier.is_empty() {
                break;
            }
            let mut slot_of = vec![NO_SLOT; nodes.len()];
            for (s, &node) in frontier.iter().enumerate() {
                slot_of[node] = s;
            }
            let mut best: Vec<Option<Candidate>> = vec![None; frontier.len()];

            for (f, order) in self.sorted.iter().enumerate() {
                let mut scan = vec![
                    Scan {
                        grad: 0.0,
                        hess: 0.0,
                        last: 0.0,
                        seen: false,
                    };
                    frontier.len()
                ];
                for &row in order {
                    let row = row as usize;
                    let s = slot_of.get(position[row]).copied().unwrap_or(NO_SLOT);
                    if s == NO_SLOT {
                        continue;
                    }
                    let x = self.data.row(row)[f];
                    let st = &mut scan[s];
                    if st.seen && x > st.last {
                        let total = stats[frontier[s]];
                        let (gl, hl) = (st.grad, st.hess);
                        let (gr, hr) = (total.grad - gl, total.hess - hl);
                        if hl >= self.config.min_child_weight && hr >= self.config.min_child_weight {
                            let gain = self.gain(gl, hl, gr, hr);
                            if best[s].is_none_or(|b| gain > b.gain) {
                                let mid = 0.5 * (st.last + x);
                                best[s] = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold: if mid > st.last { mid } else { x },
                                    left_grad: gl,
                                    left_hess: hl,
                                });
                            }
                        }
                    }
                    st.grad += grad[row];
                    st.hess += hess[row];
                    st.last = x;
                    st.seen = true;
                }
            }

            let mut next = Vec::new();
            let mut split_of = vec![None; nodes.len()];
            for (s, &node) in frontier.iter().enumerate() {
                let Some(c) = best[s].filter(|c| c.gain > MIN_SPLIT_GAIN) else {
                    continue;
                };
                let total = stats[node];
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                stats.push(NodeStats {
                    grad: c.left_grad,
                    hess: c.left_hess,
                    gain: 0.0,
                });
                stats.push(NodeStats {
                    grad: total.grad - c.left_grad,
                    hess: total.hess - c.left_hess,
                    gain: 0.0,
                });
                nodes[node] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                };
                stats[node].gain = c.gain;
                split_of[node] = Some((c.feature, c.threshold, left, right));
                next.push(left);
                next.push(right);
            }
            for (row, pos) in position.iter_mut().enumerate() {
                if let Some((f, t, l, r)) = split_of[*pos] {
                    *pos = if self.data.row(row)[f] < t { l } else { r };
                }
            }
            frontier = next;
        }

        for (node, st) in nodes.iter_mut().zip(&stats) {
            if let Node::Leaf { value } = node {
                *value = self.leaf_weight(st.grad, st.hess);
            }
        }
        let outputs = position
            .iter()
            .map(|&p| match nodes[p] {
                Node::Leaf { value } => value,
                Node::Split { .. } => unreachable!("rows end in leaves"),
            })
            .collect();
        (Tree { nodes, stats }, outputs)
    }
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    classes: Vec<String>,
    feature_names: Vec<String>,
    eta: f64,
    max_depth: usize,
    alpha: f64,
    lambda: f64,
    base_score: f64,
    #[serde(default)]
    seed: u64,
    trees: Vec<TreeFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    round: usize,
    class: usize,
    nodes: Vec<NodeFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeFile {
    Split(SplitFile),
    Leaf(LeafFile),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    f: usize,
    t: f64,
    l: usize,
    r: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeafFile {
    leaf: f64,
}

impl GbdtModel {
    pub fn to_json(&self) -> String {
        let k = self.n_classes();
        let file = ModelFile {
            version: MODEL_VERSION,
            classes: self.classes.clone(),
            feature_names: self.feature_names.clone(),
            eta: self.eta,
            max_depth: self.max_depth,
            alpha: self.alpha,
            lambda: self.lambda,
            base_score: self.base_score,
            seed: self.seed,
            trees: self
                .trees
                .iter()
                .enumerate()
                .map(|(i, t)| TreeFile {
                    round: i / k,
                    class: i % k,
                    nodes: t
                        .nodes
                        .iter()
                        .map(|n| match *n {
                            Node::Split {
                                feature,
                                threshold,
                                left,
                                right,
                            } => NodeFile::Split(SplitFile {
                                f: feature,
                                t: threshold,
                                l: left,
                                r: right,
                            }),
                            Node::Leaf { value } => NodeFile::Leaf(LeafFile { leaf: value }),
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string(&file).expect("model values are finite");
        text.push('\n');
        text
    }

    /// Parses a model document, accepting any feature-name set.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Model(format!("invalid model file: {e}")))?;
        if file.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                file.version
            )));
        }
        let k = file.classes.len();
        let mut trees = Vec::with_capacity(file.trees.len());
        for (i, t) in file.trees.into_iter().enumerate() {
            if k == 0 || t.round != i / k || t.class != i % k {
                return Err(Error::Model(format!(
                    "tree {i} is labeled round {} class {}, expected round-major order",
                    t.round, t.class
                )));
            }
            let nodes = t
                .nodes
                .into_iter()
                .map(|n| match n {
                    NodeFile::Split(s) => Node::Split {
                        feature: s.f,
                        threshold: s.t,
                        left: s.l,
                        right: s.r,
                    },
                    NodeFile::Leaf(l) => Node::Leaf { value: l.leaf },
                })
                .collect();
            trees.push(Tree::from_nodes(nodes).map_err(|e| Error::Model(format!("tree {i}: {e}")))?);
        }
        let config = GbdtConfig {
            max_depth: file.max_depth,
            learning_rate: file.eta,
            alpha: file.alpha,
            lambda: file.lambda,
            base_score: file.base_score,
            seed: file.seed,
            ..GbdtConfig::default()
        };
        GbdtModel::from_trees(file.classes, file.feature_names, &config, trees)
    }
}

pub fn save_model(model: &GbdtModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_json()).map_err(|e| Error::io(path, e))
}

/// Loads a model over the eight Fourier features.
pub fn load_model(path: impl AsRef<Path>) -> Result<GbdtModel> {
    load_model_with_features(path, &FEATURE_NAMES)
}

/// Loads a model and checks that it was trained on `expected` features.
pub fn load_model_with_features(path: impl AsRef<Path>, expected: &[&str]) -> Result<GbdtModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model = GbdtModel::from_json(&text)?;
    if model.feature_names.iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(Error::Model(format!(
            "{}: model feature names {:?} do not match expected {:?}",
            path.display(),
            model.feature_names,
            expected
        )));
    }
    Ok(model)
}

/// Names of the eight Fourier features as owned strings.
pub fn fourier_feature_names() -> Vec<String> {
    FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

const _: () = assert!(FEATURE_NAMES.len() == FEATURE_COUNT);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    fn xor_set(seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = TrainSet::new(names(2), vec!["a".into(), "b".into()]);
        let centers = [(-1.0, -1.0, 0), (1.0, 1.0, 0), (-1.0, 1.0, 1), (1.0, -1.0, 1)];
        for i in 0..400 {
            let (cx, cy, label) = centers[i % 4];
            let x: f64 = cx + rng.random_range(-0.4..0.4);
            let y: f64 = cy + rng.random_range(-0.4..0.4);
            set.push(&[x, y], label);
        }
        set
    }

    fn blobs(k: usize, per: usize, seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = (0..k).map(|c| format!("c{c}")).collect();
        let mut set = TrainSet::new(names(3), classes);
        for i in 0..k * per {
            let c = i % k;
            let row = [
                c as f64 + rng.random_range(-0.8..0.8),
                (c % 2) as f64 + rng.random_range(-0.5..0.5),
                rng.random_range(0.0..1.0),
            ];
            set.push(&row, c);
        }
        set
    }

    fn accuracy(model: &GbdtModel, data: &TrainSet) -> f64 {
        let hits = (0..data.len())
            .filter(|&i| model.predict_label(data.row(i)).unwrap() == data.label(i))
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn xor_is_learned_at_depth_two() {
        let data = xor_set(3);
        let config = GbdtConfig {
            rounds: 20,
            max_depth: 2,
            learning_rate: 0.5,
            alpha: 0.0,
            ..GbdtConfig::default()
        };
        let model = train(&data, &config).unwrap();
        assert_eq!(model.trees().len(), 40);
        assert_eq!(accuracy(&model, &data), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut set = TrainSet::new(names(1), vec!["a".into(), "b".into()]);
        for i in 0..20 {
            set.push(&[i as f64], 0);
        }
        assert!(matches!(train(&set, &GbdtConfig::default()), Err(Error::Training(_))));
    }

    #[test]
    fn non_finite_feature_names_row() {
        let mut set = blobs(2, 10, 1);
        set.push(&[1.0, f64::NAN, 0.0], 1);
        match train(&set, &GbdtConfig::default()) {
            Err(Error::Data { row, .. }) => assert_eq!(row, 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(3, 60, 5);
        let config = GbdtConfig {
            rounds: 15,
            ..GbdtConfig::default()
        };
        let a = train(&data, &config).unwrap().to_json();
        let b = train(&data, &config).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_trees_give_uniform_probabilities() {
        let model = GbdtModel::from_trees(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            names(2),
            &GbdtConfig::default(),
            Vec::new(),
        )
        .unwrap();
        let p = model.predict_proba(&[0.3, -2.0]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn hand_built_stumps_match_manual_softmax() {
        let trees = vec![
            Tree::stump(0, 0.5, -1.0, 2.0),
            Tree::stump(1, 0.0, 0.5, -0.5),
            Tree::leaf(0.25),
        ];
        let model = GbdtModel::from_trees(
            vec!["a".into(), "b".into(), "c".into()],
            names(2),
            &GbdtConfig::default(),
            trees,
        )
        .unwrap();
        let x = [1.0, -1.0];
        // scores: a = 2.0, b = 0.5, c = 0.25
        let e = [2.0f64.exp(), 0.5f64.exp(), 0.25f64.exp()];
        let z: f64 = e.iter().sum();
        let p = model.predict_proba(&x).unwrap();
        for (got, want) in p.iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(model.predict_label(&x).unwrap(), 0);
        assert!(model.predict_proba(&[f64::INFINITY, 0.0]).is_err());
        assert!(model.predict_proba(&[1.0]).is_err());
    }

    #[test]
    fn loss_never_increases() {
        let data = blobs(4, 80, 9);
        let config = GbdtConfig {
            rounds: 40,
            max_depth: 4,
            ..GbdtConfig::default()
        };
        let (_, report) = train_with_report(&data, &config).unwrap();
        for w in report.loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(report.loss.last().unwrap() < &report.loss[0]);
    }

    #[test]
    fn gains_recompute_from_stats() {
        let data = blobs(3, 70, 2);
        let config = GbdtConfig {
            rounds: 5,
            ..GbdtConfig::default()
        };
        let model = train(&data, &config).unwrap();
        let lambda = config.lambda;
        let mut splits = 0;
        for tree in model.trees() {
            assert!(tree.depth() <= config.max_depth);
            for (idx, node) in tree.nodes().iter().enumerate() {
                if let Node::Split { left, right, .. } = *node {
                    splits += 1;
                    let (p, l, r) = (tree.stats()[idx], tree.stats()[left], tree.stats()[right]);
                    let gain = 0.5
                        * (l.grad * l.grad / (l.hess + lambda) + r.grad * r.grad / (r.hess + lambda)
                            - p.grad * p.grad / (p.hess + lambda));
                    assert!(p.gain >= 0.0);
                    assert!((gain - p.gain).abs() < 1e-9, "{gain} vs {}", p.gain);
                    assert!((l.grad + r.grad - p.grad).abs() < 1e-9);
                }
            }
        }
        assert!(splits > 0);
    }

    #[test]
    fn leaf_weight_soft_thresholds() {
        let config = GbdtConfig::default();
        let b = TreeBuilder {
            data: &blobs(2, 10, 1),
            sorted: &[],
            config: &config,
        };
        assert_eq!(b.leaf_weight(5.0, 3.0), 0.0);
        assert_eq!(b.leaf_weight(-9.99, 3.0), 0.0);
        assert!((b.leaf_weight(-30.0, 9.0) - 0.046 * 20.0 / 10.0).abs() < 1e-15);
        assert!((b.leaf_weight(30.0, 9.0) + 0.046 * 20.0 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn save_load_preserves_scores_bitwise() {
        let data = blobs(3, 50, 4);
        let model = train(
            &data,
            &GbdtConfig {
                rounds: 10,
                ..GbdtConfig::default()
            },
        )
        .unwrap();
        let back = GbdtModel::from_json(&model.to_json()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = [
                rng.random_range(-1.0..4.0),
                rng.random_range(-1.0..2.0),
                rng.random_range(0.0..1.0),
            ];
            let a = model.scores(&x);
            let b = back.scores(&x);
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
            assert_eq!(model.predict_proba(&x).unwrap(), back.predict_proba(&x).unwrap());
        }
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs(2, 20, 4);
        let model = train(
            &data,
            &GbdtConfig {
                rounds: 3,
                ..GbdtConfig::default()
            },
        )
        .unwrap();
        let json = model.to_json();

        let truncated = dir.path().join("t.json");
        fs::write(&truncated, &json[..json.len() / 2]).unwrap();
        assert!(matches!(
            load_model_with_features(&truncated, &["x0", "x1", "x2"]),
            Err(Error::Model(_))
        ));

        let versioned = dir.path().join("v.json");
        fs::write(&versioned, json.replacen("\"version\":1", "\"version\":7", 1)).unwrap();
        let err = load_model_with_features(&versioned, &["x0", "x1", "x2"]).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let good = dir.path().join("m.json");
        save_model(&model, &good).unwrap();
        assert!(load_model_with_features(&good, &["x0", "x1", "x2"]).is_ok());
        let err = load_model(&good).unwrap_err();
        assert!(err.to_string().contains("feature names"), "{err}");
    }

    #[test]
    fn file_layout_is_round_major() {
        let model = GbdtModel::from_trees(
            vec!["a".into(), "b".into()],
            names(1),
            &GbdtConfig::default(),
            vec![Tree::leaf(1.0), Tree::stump(0, 0.5, -1.0, 1.0), Tree::leaf(0.5), Tree::leaf(0.0)],
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&model.to_json()).unwrap();
        let trees = v["trees"].as_array().unwrap();
        let order: Vec<(u64, u64)> = trees
            .iter()
            .map(|t| (t["round"].as_u64().unwrap(), t["class"].as_u64().unwrap()))
            .collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(
            trees[1]["nodes"][0],
            serde_json::json!({"f": 0, "t": 0.5, "l": 1, "r": 2})
        );
        assert_eq!(trees[0]["nodes"][0], serde_json::json!({"leaf": 1.0}));
        for key in ["version", "classes", "feature_names", "eta", "max_depth", "alpha", "lambda", "base_score"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn malformed_trees_are_rejected() {
        assert!(Tree::from_nodes(vec![]).is_err());
        assert!(Tree::from_nodes(vec![Node::Split {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 1
        }])
        .is_err());
        assert!(Tree::from_nodes(vec![
            Node::Split { feature: 0, threshold: 0.0, left: 1, right: 1 },
            Node::Leaf { value: 0.0 },
        ])
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn probabilities_are_a_distribution(seed in any::<u64>(), x0 in -2.0f64..5.0, x1 in -2.0f64..3.0) {
            let data = blobs(3, 30, seed % 50);
            let model = train(&data, &GbdtConfig { rounds: 8, max_depth: 3, ..GbdtConfig::default() }).unwrap();
            let p = model.predict_proba(&[x0, x1, 0.5]).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert_eq!(argmax(&p), model.predict_label(&[x0, x1, 0.5]).unwrap());
        }

        #[test]
        fn unused_features_have_no_effect(seed in any::<u64>(), x in prop::array::uniform3(-2.0f64..5.0), alt in -100.0f64..100.0) {
            let data = blobs(3, 30, seed % 50);
            let model = train(&data, &GbdtConfig { rounds: 6, max_depth: 2, ..GbdtConfig::default() }).unwrap();
            let used: Vec<usize> = model.trees().iter().flat_map(|t| t.used_features()).collect();
            for j in 0..3 {
                if !used.contains(&j) {
                    let mut y = x;
                    y[j] = alt;
                    prop_assert_eq!(model.predict_proba(&x).unwrap(), model.predict_proba(&y).unwrap());
                }
            }
        }
    }
}
