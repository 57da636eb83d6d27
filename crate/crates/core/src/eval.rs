//! Training and test set construction, metrics and baseline comparison.
//!
//! Training rows are single steady cycles of individually metered
//! recordings. Test samples are the events detected in annotated aggregate
//! recordings, each labeled with the nearest annotation. Classification
//! metrics use macro averaging so that rare appliances weigh as much as
//! common ones.

pub mod baseline;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{correlation_report, FeatureVector, HarmonicAnalyzer};
use crate::fitps::{find_zero_crossings, fitps, Cycle, FitpsConfig};
use crate::gbdt::{train, GbdtConfig, GbdtModel, TrainSet};
use crate::ingest::{LabeledEvent, RawStream};
use crate::pipeline::{extract_events, ExtractedEvent, PipelineConfig};

use baseline::{CartConfig, DecisionTree, LogisticConfig, LogisticRegression};

/// Cycles further than this many standard deviations from the median RMS
/// are treated as transients.
pub const STEADY_SIGMAS: f64 = 3.0;

// ---------------------------------------------------------------------------
// Training set
// ---------------------------------------------------------------------------

pub fn cycle_rms(current: &[f64]) -> f64 {
    (current.iter().map(|x| x * x).sum::<f64>() / current.len() as f64).sqrt()
}

/// Indices of the cycles whose current RMS lies within [`STEADY_SIGMAS`]
/// standard deviations of the recording's median RMS. The deviation is
/// estimated robustly (1.4826 times the median absolute deviation) so that a
/// long start-up transient cannot widen the band enough to admit itself.
pub fn steady_cycle_indices(cycles: &[Cycle]) -> Vec<usize> {
    if cycles.is_empty() {
        return Vec::new();
    }
    let rms: Vec<f64> = cycles.iter().map(|c| cycle_rms(&c.i)).collect();
    let median = median_of(rms.clone());
    let mad = median_of(rms.iter().map(|r| (r - median).abs()).collect());
    // slack for interpolation and float noise on perfectly steady recordings
    let limit = STEADY_SIGMAS * 1.4826 * mad + 1e-6 * median.max(1e-3);
    (0..rms.len()).filter(|&k| (rms[k] - median).abs() <= limit).collect()
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One labeled feature row per steady cycle of a single-appliance recording.
pub fn recording_rows(stream: &RawStream, label: &str, config: &FitpsConfig) -> Result<Vec<(FeatureVector, String)>> {
    let cycles = fitps(stream, config)?;
    let analyzer = HarmonicAnalyzer::new(config.cycle_samples);
    steady_cycle_indices(&cycles)
        .into_iter()
        .map(|k| Ok((analyzer.features(&cycles[k].i)?, label.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRows {
    pub rows: Vec<(FeatureVector, String)>,
    /// Source ids of recordings that produced no rows.
    pub skipped: Vec<String>,
}

impl TrainRows {
    pub fn train_set(&self) -> TrainSet {
        TrainSet::from_features(&self.rows)
    }

    pub fn features(&self) -> Vec<FeatureVector> {
        self.rows.iter().map(|r| r.0).collect()
    }
}

/// Feature rows of every recording, in input order. Recordings without a
/// complete cycle are skipped with a warning.
pub fn build_train_set(recordings: &[(String, RawStream)], config: &FitpsConfig) -> TrainRows {
    let per: Vec<(String, Result<Vec<(FeatureVector, String)>>)> = recordings
        .par_iter()
        .map(|(label, s)| (s.source_id.clone(), recording_rows(s, label, config)))
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in per {
        match r {
            Ok(v) if !v.is_empty() => rows.extend(v),
            Ok(_) => {
                log::warn!("{id}: no steady cycles, skipped");
                skipped.push(id);
            }
            Err(e) => {
                log::warn!("{id}: {e}, skipped");
                skipped.push(id);
            }
        }
    }
    TrainRows { rows, skipped }
}

/// CSV of the pairwise feature correlations of the training rows.
pub fn correlation_csv(rows: &TrainRows) -> Result<String> {
    Ok(correlation_report(&rows.features())?.to_csv())
}

// ---------------------------------------------------------------------------
// Test set
// ---------------------------------------------------------------------------

/// A detected event labeled from the annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub source_id: String,
    pub label: String,
    pub extracted: ExtractedEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TestSet {
    pub samples: Vec<TestSample>,
    pub detected: usize,
    pub annotated: usize,
    pub matched: usize,
    /// Annotations with no detection within the matching tolerance.
    pub missed: usize,
    /// Detections with no annotation within the matching tolerance.
    pub spurious: usize,
}

impl TestSet {
    pub fn merge(&mut self, other: TestSet) {
        self.samples.extend(other.samples);
        self.detected += other.detected;
        self.annotated += other.annotated;
        self.matched += other.matched;
        self.missed += other.missed;
        self.spurious += other.spurious;
    }

    pub fn detection_precision(&self) -> f64 {
        ratio(self.matched, self.detected)
    }

    pub fn detection_recall(&self) -> f64 {
        ratio(self.matched, self.annotated)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Cycle index containing each annotation, using the same rising
/// zero-crossings as the resampler. Annotations before the first crossing
/// map to cycle 0.
pub fn annotation_cycles(voltage: &[f64], events: &[LabeledEvent]) -> Vec<usize> {
    let crossings = find_zero_crossings(voltage).unwrap_or_default();
    events
        .iter()
        .map(|e| {
            crossings
                .partition_point(|&c| c <= e.sample_index as f64)
                .saturating_sub(1)
        })
        .collect()
}

/// Pairs each detection (in order) with the nearest still unmatched
/// annotation at most `tolerance` cycles away; ties go to the earlier one.
pub fn match_detections(detected: &[usize], annotated: &[usize], tolerance: usize) -> Vec<Option<usize>> {
    let mut used = vec![false; annotated.len()];
    detected
        .iter()
        .map(|&d| {
            let best = annotated
                .iter()
                .enumerate()
                .filter(|&(j, &a)| !used[j] && a.abs_diff(d) <= tolerance)
                .min_by_key(|&(j, &a)| (a.abs_diff(d), j))
                .map(|(j, _)| j);
            if let Some(j) = best {
                used[j] = true;
            }
            best
        })
        .collect()
}

/// Detects events in an annotated aggregate stream and labels them.
pub fn build_test_set(stream: &RawStream, annotations: &[LabeledEvent], config: &PipelineConfig) -> Result<TestSet> {
    let extracted = extract_events(stream, config)?;
    let ann_cycles = annotation_cycles(&stream.voltage, annotations);
    let det_cycles: Vec<usize> = extracted.iter().map(|e| e.event.cycle_index).collect();
    let pairs = match_detections(&det_cycles, &ann_cycles, config.detector.window);
    let matched = pairs.iter().flatten().count();
    let samples = extracted
        .into_iter()
        .zip(pairs)
        .filter_map(|(ex, m)| {
            m.map(|j| TestSample {
                source_id: stream.source_id.clone(),
                label: annotations[j].label.clone(),
                extracted: ex,
            })
        })
        .collect();
    Ok(TestSet {
        samples,
        detected: det_cycles.len(),
        annotated: annotations.len(),
        matched,
        missed: annotations.len() - matched,
        spurious: det_cycles.len() - matched,
    })
}

/// Test sets of several streams, merged in input order.
pub fn build_test_sets(streams: &[(RawStream, Vec<LabeledEvent>)], config: &PipelineConfig) -> Result<TestSet> {
    let parts: Vec<TestSet> = streams
        .par_iter()
        .map(|(s, a)| build_test_set(s, a, config))
        .collect::<Result<_>>()?;
    let mut all = TestSet::default();
    for p in parts {
        all.merge(p);
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of the class.
    pub support: usize,
    pub predicted: usize,
    /// Set when precision or recall had a zero denominator and was taken as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub n_test: usize,
    pub classes: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
}

/// Metrics of `predicted` against `truth`, both indexing `classes`. Macro
/// averages run over classes that occur in either.
pub fn metrics(classes: &[String], truth: &[usize], predicted: &[usize]) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(Error::InsufficientData("no test samples to evaluate".into()));
    }
    assert_eq!(truth.len(), predicted.len());
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(k);
    let (mut sp, mut sr, mut sf, mut present) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let pred: usize = confusion.iter().map(|r| r[c]).sum();
        let precision = ratio(tp, pred);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 || pred > 0 {
            sp += precision;
            sr += recall;
            sf += f1;
            present += 1;
        }
        per_class.push(ClassMetrics {
            label: classes[c].clone(),
            precision,
            recall,
            f1,
            support,
            predicted: pred,
            undefined: support == 0 || pred == 0,
        });
    }
    let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
    let m = present as f64;
    Ok(MetricsReport {
        accuracy: trace as f64 / truth.len() as f64,
        macro_precision: sp / m,
        macro_recall: sr / m,
        macro_f1: sf / m,
        n_test: truth.len(),
        classes: classes.to_vec(),
        confusion,
        per_class,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics are finite");
        s.push('\n');
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            out.push_str(c);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Model classes followed by any test labels the model does not know, sorted.
fn label_space(model_classes: &[String], labels: impl Iterator<Item = String>) -> Vec<String> {
    let mut classes = model_classes.to_vec();
    let mut extra: Vec<String> = labels.filter(|l| !model_classes.contains(l)).collect();
    extra.sort();
    extra.dedup();
    classes.extend(extra);
    classes
}

/// Classifies rows and scores them against their labels.
pub fn evaluate_rows(model: &GbdtModel, rows: &[(FeatureVector, String)]) -> Result<MetricsReport> {
    let classes = label_space(model.classes(), rows.iter().map(|r| r.1.clone()));
    let index = |l: &str| classes.iter().position(|c| c == l).expect("label in space");
    let predicted = rows
        .par_iter()
        .map(|(f, _)| model.predict_label(&f.0))
        .collect::<Result<Vec<usize>>>()?;
    let truth: Vec<usize> = rows.iter().map(|r| index(&r.1)).collect();
    metrics(&classes, &truth, &predicted)
}

pub fn evaluate(model: &GbdtModel, test: &TestSet) -> Result<MetricsReport> {
    let rows: Vec<(FeatureVector, String)> = test
        .samples
        .iter()
        .map(|s| (s.extracted.features, s.label.clone()))
        .collect();
    evaluate_rows(model, &rows)
}

// ---------------------------------------------------------------------------
// Baselines, N_a sweep, held-out recordings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineReport {
    pub gbdt: f64,
    pub decision_tree: f64,
    pub logistic_regression: f64,
}

impl BaselineReport {
    /// Boosted trees at least as accurate as a single tree, which is at least
    /// as accurate as the linear model.
    pub fn ordered(&self) -> bool {
        self.gbdt >= self.decision_tree && self.decision_tree >= self.logistic_regression
    }
}

/// Accuracy of the boosted model and both baselines on the same test rows.
/// The baselines are trained on `train`.
pub fn baselines(train: &TrainSet, test: &[(FeatureVector, String)], gbdt: &GbdtModel) -> Result<BaselineReport> {
    if test.is_empty() {
        return Err(Error::InsufficientData("no test samples for baselines".into()));
    }
    let tree = DecisionTree::fit(train, &CartConfig::default())?;
    let lr = LogisticRegression::fit(train, &LogisticConfig::default())?;
    let accuracy = |predict: &(dyn Fn(&[f64]) -> Option<String> + Sync)| {
        let hits = test
            .par_iter()
            .filter(|(f, l)| predict(&f.0).as_deref() == Some(l.as_str()))
            .count();
        hits as f64 / test.len() as f64
    };
    let name = |c: usize| train.classes().get(c).cloned();
    Ok(BaselineReport {
        gbdt: accuracy(&|x| gbdt.predict_label(x).ok().map(|c| gbdt.classes()[c].clone())),
        decision_tree: accuracy(&|x| name(tree.predict(x))),
        logistic_regression: accuracy(&|x| name(lr.predict(x))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    /// Post-event cycles in the signature window.
    pub na: usize,
    pub accuracy: f64,
    /// Matched, complete events that were classified.
    pub evaluated: usize,
    /// Matched events whose window ran past the end of the stream.
    pub skipped_partial: usize,
}

/// Classification accuracy on the annotated streams for each window length.
pub fn sweep_na(
    model: &GbdtModel,
    streams: &[(RawStream, Vec<LabeledEvent>)],
    na_values: &[usize],
    base: &PipelineConfig,
) -> Result<Vec<SweepPoint>> {
    na_values
        .iter()
        .map(|&na| {
            let config = PipelineConfig {
                cycles_after: na,
                ..*base
            };
            let test = build_test_sets(streams, &config)?;
            let (complete, partial): (Vec<&TestSample>, Vec<&TestSample>) =
                test.samples.iter().partition(|s| !s.extracted.signature.partial);
            let mut hits = 0;
            for s in &complete {
                let c = model.predict_label(&s.extracted.features.0)?;
                if model.classes()[c] == s.label {
                    hits += 1;
                }
            }
            Ok(SweepPoint {
                na,
                accuracy: ratio(hits, complete.len()),
                evaluated: complete.len(),
                skipped_partial: partial.len(),
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("na,accuracy\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.na, p.accuracy);
    }
    out
}

/// Cycle-level metrics with whole recordings held out: per label, a
/// `fraction` of its recordings (at least one, when it has two or more) is
/// moved to the test side.
pub fn holdout_by_recording(
    recordings: &[(String, RawStream)],
    fraction: f64,
    seed: u64,
    gbdt: &GbdtConfig,
    fitps_config: &FitpsConfig,
) -> Result<MetricsReport> {
    let mut labels: Vec<&String> = recordings.iter().map(|r| &r.0).collect();
    labels.sort();
    labels.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = Vec::new();
    for label in labels {
        let mut idx: Vec<usize> = (0..recordings.len()).filter(|&i| &recordings[i].0 == label).collect();
        if idx.len() < 2 {
            continue;
        }
        idx.shuffle(&mut rng);
        let take = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        test_idx.extend_from_slice(&idx[..take]);
    }
    test_idx.sort_unstable();
    let (test, train_recs): (Vec<_>, Vec<_>) = recordings
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| test_idx.binary_search(i).is_ok());
    let strip = |v: Vec<(usize, (String, RawStream))>| v.into_iter().map(|x| x.1).collect::<Vec<_>>();
    let train_rows = build_train_set(&strip(train_recs), fitps_config);
    let test_rows = build_train_set(&strip(test), fitps_config);
    if test_rows.rows.is_empty() {
        return Err(Error::InsufficientData(
            "no label has two or more recordings to hold out".into(),
        ));
    }
    let model = train(&train_rows.train_set(), gbdt)?;
    evaluate_rows(&model, &test_rows.rows)
}
