//! Exact interventional Shapley values for the boosted tree model.
//!
//! The value of a coalition `S` is the model output averaged over a background
//! set, with every background row's features replaced by the explained
//! instance's values on `S`. With eight features all 256 coalitions are
//! enumerated, so the attributions are exact rather than sampled.
//!
//! The full value table is built without evaluating 256 x B hybrid rows. For a
//! fixed tree and background row `b`, a hybrid row follows `x` and `b` down the
//! same branch wherever they agree; where they disagree on feature `f`, it
//! takes the `x` branch exactly when `f` is in `S`. Walking both branches
//! yields, per reachable leaf, a set of features that must be in `S` and a set
//! that must be outside it, and the leaf value is added to every coalition
//! meeting both constraints. [`coalition_value`] evaluates the hybrids
//! directly and is kept as the reference implementation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{softmax, GbdtModel, Node, Tree};

pub const DEFAULT_BACKGROUND_SIZE: usize = 100;
/// Largest feature count for which the coalition table is enumerated.
pub const MAX_EXPLAINED_FEATURES: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Raw additive class score; attributions are exactly efficient.
    #[default]
    ClassScore,
    /// Softmax probability of the class.
    ClassProbability,
}

/// Reference rows that stand in for "feature unknown".
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSet {
    rows: Vec<Vec<f64>>,
}

impl BackgroundSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Domain("background set is empty".into()));
        };
        let width = first.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::Data {
                    row: i,
                    message: format!("background row has {} features, expected {width}", r.len()),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data {
                    row: i,
                    message: "background row is not finite".into(),
                });
            }
        }
        Ok(BackgroundSet { rows })
    }

    /// Draws `size` rows without replacement; all rows when `size` is at
    /// least the row count. Selected rows keep their original order.
    pub fn sample(rows: &[Vec<f64>], size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Domain("background size must be at least 1".into()));
        }
        if size >= rows.len() {
            return BackgroundSet::new(rows.to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, rows.len(), size).into_vec();
        idx.sort_unstable();
        BackgroundSet::new(idx.into_iter().map(|i| rows[i].clone()).collect())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.rows[0].len()
    }

    pub fn to_csv(&self, feature_names: &[String]) -> String {
        let mut out = feature_names.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, feature_names: &[String]) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv(feature_names)).map_err(|e| Error::io(path, e))
    }

    /// Reads a background CSV whose header must equal `feature_names`.
    pub fn read_csv(path: impl AsRef<Path>, feature_names: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Err(Error::EmptyInput(path.to_path_buf()));
        };
        let names: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        if names.iter().copied().ne(feature_names.iter().map(String::as_str)) {
            return Err(parse_err(1, format!("header {names:?} does not match {feature_names:?}")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            let row = line
                .trim()
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(n + 1, e.to_string()))?;
            if row.len() != feature_names.len() {
                return Err(parse_err(n + 1, format!("expected {} values", feature_names.len())));
            }
            rows.push(row);
        }
        BackgroundSet::new(rows)
    }
}

/// Per-feature attribution of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub target_class: String,
    pub class_index: usize,
    pub phi: Vec<f64>,
    /// Expected output over the background, `v(empty set)`.
    pub base_value: f64,
    /// Output at the explained instance, `v(all features)`.
    pub output: f64,
    pub output_mode: OutputMode,
}

impl Explanation {
    /// `sum(phi) + base_value - output`; zero up to rounding in score mode.
    pub fn efficiency_gap(&self) -> f64 {
        self.phi.iter().sum::<f64>() + self.base_value - self.output
    }
}

fn check(model: &GbdtModel, x: &[f64], background: &BackgroundSet, class: usize) -> Result<()> {
    let n = model.n_features();
    if n > MAX_EXPLAINED_FEATURES {
        return Err(Error::Domain(format!(
            "cannot enumerate coalitions over {n} features"
        )));
    }
    if x.len() != n || background.n_features() != n {
        return Err(Error::Domain(format!(
            "instance has {} and background {} features, model expects {n}",
            x.len(),
            background.n_features()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("explained instance is not finite".into()));
    }
    if class >= model.n_classes() {
        return Err(Error::Domain(format!("class index {class} out of range")));
    }
    Ok(())
}

fn output(model: &GbdtModel, z: &[f64], class: usize, mode: OutputMode) -> f64 {
    match mode {
        OutputMode::ClassScore => model.class_score(z, class),
        OutputMode::ClassProbability => softmax(&model.scores(z))[class],
    }
}

/// `v(S)` by direct evaluation of every hybrid row. Bit `j` of `coalition`
/// selects feature `j` from `x`.
pub fn coalition_value(
    model: &GbdtModel,
    x: &[f64],
    background: &BackgroundSet,
    coalition: u32,
    class: usize,
    mode: OutputMode,
) -> Result<f64> {
    check(model, x, background, class)?;
    let mut z = vec![0.0; x.len()];
    let total: f64 = background
        .rows()
        .iter()
        .map(|b| {
            for j in 0..x.len() {
                z[j] = if coalition >> j & 1 == 1 { x[j] } else { b[j] };
            }
            output(model, &z, class, mode)
        })
        .sum();
    Ok(total / background.len() as f64)
}

/// Largest feature count for which constraints are accumulated in a dense
/// ternary table (`3^n` cells) before expansion.
const TERNARY_MAX_FEATURES: usize = 12;

/// Walks `tree` for background row `b`, calling `leaf(value, inc, exc, code)`
/// for every reachable leaf. The leaf counts towards coalition `S` exactly
/// when `inc` is a subset of `S` and `exc` is disjoint from it. `code` is the
/// same constraint in base 3 (digit 1 include, 2 exclude, 0 free).
fn walk_constraints(tree: &Tree, x: &[f64], b: &[f64], pow3: &[usize], mut leaf: impl FnMut(f64, u32, u32, usize)) {
    let mut stack = vec![(0usize, 0u32, 0u32, 0usize)];
    while let Some((idx, inc, exc, code)) = stack.pop() {
        match tree.nodes()[idx] {
            Node::Leaf { value } => leaf(value, inc, exc, code),
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let bit = 1u32 << feature;
                let gx = if x[feature] < threshold { left } else { right };
                let gb = if b[feature] < threshold { left } else { right };
                if gx == gb {
                    stack.push((gx, inc, exc, code));
                    continue;
                }
                let fresh = (inc | exc) & bit == 0;
                if exc & bit == 0 {
                    let c = if fresh { code + pow3[feature] } else { code };
                    stack.push((gx, inc | bit, exc, c));
                }
                if inc & bit == 0 {
                    let c = if fresh { code + 2 * pow3[feature] } else { code };
                    stack.push((gb, inc, exc | bit, c));
                }
            }
        }
    }
}

/// Sum over `rows` and the class-`class` trees of each tree's output on the
/// hybrid of `x` and the row, for every coalition. Excludes the base score.
fn tree_table(model: &GbdtModel, x: &[f64], rows: &[Vec<f64>], class: usize) -> Vec<f64> {
    let n = model.n_features();
    let size = 1usize << n;
    let pow3: Vec<usize> = (0..n).map(|j| 3usize.pow(j as u32)).collect();
    let mut table = vec![0.0; size];
    if n > TERNARY_MAX_FEATURES {
        let full = (size - 1) as u32;
        for b in rows {
            for tree in model.class_trees(class) {
                walk_constraints(tree, x, b, &pow3, |value, inc, exc, _| {
                    let free = full & !inc & !exc;
                    let mut sub = free;
                    loop {
                        table[(inc | sub) as usize] += value;
                        if sub == 0 {
                            break;
                        }
                        sub = (sub - 1) & free;
                    }
                });
            }
        }
        return table;
    }
    let cells = 3usize.pow(n as u32);
    let mut ternary = vec![0.0; cells];
    for b in rows {
        for tree in model.class_trees(class) {
            walk_constraints(tree, x, b, &pow3, |value, _, _, code| ternary[code] += value);
        }
    }
    // Resolve free digits one feature at a time: a free cell counts for both
    // the include and the exclude side.
    for &p in &pow3 {
        for code in 0..cells {
            if (code / p) % 3 == 0 {
                let v = ternary[code];
                if v != 0.0 {
                    ternary[code + p] += v;
                    ternary[code + 2 * p] += v;
                }
            }
        }
    }
    for (s, t) in table.iter_mut().enumerate() {
        let code: usize = (0..n).map(|j| if s >> j & 1 == 1 { pow3[j] } else { 2 * pow3[j] }).sum();
        *t = ternary[code];
    }
    table
}

/// `v(S)` for every coalition, indexed by bitmask.
pub fn coalition_table(
    model: &GbdtModel,
    x: &[f64],
    background: &BackgroundSet,
    class: usize,
    mode: OutputMode,
) -> Result<Vec<f64>> {
    check(model, x, background, class)?;
    let size = 1usize << model.n_features();
    let rows = background.len() as f64;
    let mut values = match mode {
        OutputMode::ClassScore => {
            let mut t = tree_table(model, x, background.rows(), class);
            for v in &mut t {
                *v += rows * model.base_score();
            }
            t
        }
        OutputMode::ClassProbability => {
            let mut values = vec![0.0; size];
            let mut scores = vec![0.0; model.n_classes()];
            for b in background.rows() {
                let per_class: Vec<Vec<f64>> = (0..model.n_classes())
                    .map(|k| tree_table(model, x, std::slice::from_ref(b), k))
                    .collect();
                for (s, v) in values.iter_mut().enumerate() {
                    for (k, t) in per_class.iter().enumerate() {
                        scores[k] = model.base_score() + t[s];
                    }
                    *v += softmax(&scores)[class];
                }
            }
            values
        }
    };
    for v in &mut values {
        *v /= rows;
    }
    Ok(values)
}

/// `|S|! (n - |S| - 1)! / n!` for `|S| = 0..n`.
pub fn shapley_weights(n: usize) -> Vec<f64> {
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    (0..n)
        .map(|s| fact(s) * fact(n - s - 1) / fact(n))
        .collect()
}

/// Shapley values from a complete coalition table over `n` features.
pub fn shapley_from_table(values: &[f64], n: usize) -> Vec<f64> {
    let weights = shapley_weights(n);
    (0..n)
        .map(|j| {
            let bit = 1usize << j;
            (0..values.len())
                .filter(|s| s & bit == 0)
                .map(|s| weights[s.count_ones() as usize] * (values[s | bit] - values[s]))
                .sum()
        })
        .collect()
}

pub fn shapley(
    model: &GbdtModel,
    x: &[f64],
    background: &BackgroundSet,
    class: usize,
    mode: OutputMode,
) -> Result<Explanation> {
    let n = model.n_features();
    let values = coalition_table(model, x, background, class, mode)?;
    Ok(Explanation {
        target_class: model.classes()[class].clone(),
        class_index: class,
        phi: shapley_from_table(&values, n),
        base_value: values[0],
        output: values[(1 << n) - 1],
        output_mode: mode,
    })
}

/// One (instance, feature) cell of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub instance_id: usize,
    pub feature_name: String,
    pub feature_value: f64,
    pub phi: f64,
}

/// Attributions of `class` for many instances, one row per feature.
pub fn summary_table(
    model: &GbdtModel,
    instances: &[Vec<f64>],
    background: &BackgroundSet,
    class: usize,
    mode: OutputMode,
) -> Result<Vec<SummaryRow>> {
    if instances.is_empty() {
        return Err(Error::Domain("summary table needs at least one instance".into()));
    }
    let explanations: Vec<Explanation> = instances
        .par_iter()
        .map(|x| shapley(model, x, background, class, mode))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(instances.len() * model.n_features());
    for (id, (x, e)) in instances.iter().zip(&explanations).enumerate() {
        for (j, name) in model.feature_names().iter().enumerate() {
            rows.push(SummaryRow {
                instance_id: id,
                feature_name: name.clone(),
                feature_value: x[j],
                phi: e.phi[j],
            });
        }
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("instance_id,feature_name,feature_value,phi\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.instance_id, r.feature_name, r.feature_value, r.phi)
            .expect("writing to a String");
    }
    out
}
