//! Streaming path from raw samples to classified, explained events.
//!
//! Samples are resampled into cycles as they arrive; each cycle's active power
//! goes through the detector. A detected event at cycle `k` opens a window made
//! of cycle `k - 1` plus the `N_a` cycles starting at `k`. Once the last of
//! those cycles has arrived the signature and features are computed and the
//! event is classified (and optionally explained) immediately.
//!
//! Cycles live in one shared queue that reaches back only as far as the oldest
//! open window, so memory stays bounded on streams of any length.
//!
//! Reported latency is `(1 + N_a) / f0 + tau`: the time needed to record the
//! window, which is fixed by the grid frequency, plus the measured compute
//! time `tau` from window completion to emission.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::detector::{active_power, DetectorConfig, DetectorState, Event};
use crate::error::{Error, Result};
use crate::explain::{shapley, BackgroundSet, Explanation, OutputMode, DEFAULT_BACKGROUND_SIZE};
use crate::features::{FeatureVector, HarmonicAnalyzer, FEATURE_NAMES};
use crate::fitps::{Cycle, CycleResampler, FitpsConfig, DEFAULT_CYCLE_SAMPLES};
use crate::gbdt::{argmax, GbdtModel};
use crate::ingest::{Direction, RawStream};
use crate::signature::{event_signature, ActivationWindow, Signature, CYCLES_BEFORE, DEFAULT_CYCLES_AFTER};

pub const DEFAULT_GRID_HZ: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Samples per resampled cycle, `T`.
    pub cycle_samples: usize,
    pub detector: DetectorConfig,
    /// Post-event cycles in the signature window, `N_a`.
    pub cycles_after: usize,
    /// Grid frequency `f0`, 50 or 60 Hz.
    pub grid_hz: f64,
    pub explain: bool,
    pub background_size: usize,
    /// Measure compute latency. When off, `tau` is reported as zero so that
    /// outputs are reproducible byte for byte.
    pub timing: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cycle_samples: DEFAULT_CYCLE_SAMPLES,
            detector: DetectorConfig::default(),
            cycles_after: DEFAULT_CYCLES_AFTER,
            grid_hz: DEFAULT_GRID_HZ,
            explain: false,
            background_size: DEFAULT_BACKGROUND_SIZE,
            timing: true,
        }
    }
}

impl PipelineConfig {
    pub fn fitps(&self) -> FitpsConfig {
        FitpsConfig {
            cycle_samples: self.cycle_samples,
            nominal_hz: self.grid_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fitps().validate()?;
        if self.grid_hz != 50.0 && self.grid_hz != 60.0 {
            return Err(Error::Domain(format!(
                "grid frequency must be 50 or 60 Hz, got {}",
                self.grid_hz
            )));
        }
        if self.detector.window == 0 {
            return Err(Error::Domain("detector window must be at least 1".into()));
        }
        if !(self.detector.z_threshold > 0.0) || !(self.detector.sigma_floor > 0.0) {
            return Err(Error::Domain(
                "z threshold and sigma floor must be positive".into(),
            ));
        }
        if self.cycles_after == 0 {
            return Err(Error::Domain("cycles after must be at least 1".into()));
        }
        if self.explain && self.background_size == 0 {
            return Err(Error::Domain("background size must be at least 1".into()));
        }
        Ok(())
    }

    /// Cycles that must be recorded before an event can be processed.
    pub fn window_cycles(&self) -> usize {
        CYCLES_BEFORE + self.cycles_after
    }

    /// Time to record the signature window, seconds.
    pub fn recording_latency_s(&self) -> f64 {
        self.window_cycles() as f64 / self.grid_hz
    }
}

/// Accumulated wall time per processing stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub fitps: Duration,
    pub detect: Duration,
    pub signature: Duration,
    pub features: Duration,
    pub predict: Duration,
    pub explain: Duration,
}

impl StageTimes {
    fn add(&mut self, other: &StageTimes) {
        self.fitps += other.fitps;
        self.detect += other.detect;
        self.signature += other.signature;
        self.features += other.features;
        self.predict += other.predict;
        self.explain += other.explain;
    }

    pub fn named(&self) -> [(&'static str, Duration); 6] {
        [
            ("fitps", self.fitps),
            ("detect", self.detect),
            ("signature", self.signature),
            ("features", self.features),
            ("predict", self.predict),
            ("explain", self.explain),
        ]
    }
}

// ---------------------------------------------------------------------------
// Event extraction
// ---------------------------------------------------------------------------

/// A detected event with its signature and features.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedEvent {
    pub event: Event,
    /// Start time of the event cycle, seconds from stream start.
    pub time_s: f64,
    pub signature: Signature,
    pub features: FeatureVector,
    /// When the window's last cycle became available.
    pub ready_at: Instant,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    event: Event,
    time_s: f64,
}

/// Streaming resampler, detector and signature estimator for one stream.
#[derive(Debug)]
pub struct EventExtractor {
    config: PipelineConfig,
    sample_rate_hz: f64,
    resampler: CycleResampler,
    detector: DetectorState,
    analyzer: HarmonicAnalyzer,
    /// Current waveforms of recent cycles with their indices.
    queue: VecDeque<(usize, Vec<f64>)>,
    pending: VecDeque<Pending>,
    next_cycle: usize,
    peak_buffered: usize,
    times: StageTimes,
}

impl EventExtractor {
    pub fn new(config: PipelineConfig, sample_rate_hz: f64) -> Result<Self> {
        config.validate()?;
        Ok(EventExtractor {
            config,
            sample_rate_hz,
            resampler: CycleResampler::new(config.fitps(), sample_rate_hz)?,
            detector: DetectorState::new(config.detector),
            analyzer: HarmonicAnalyzer::new(config.cycle_samples),
            queue: VecDeque::with_capacity(config.window_cycles() + 1),
            pending: VecDeque::new(),
            next_cycle: 0,
            peak_buffered: 0,
            times: StageTimes::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Cycles produced so far.
    pub fn cycles_seen(&self) -> usize {
        self.next_cycle
    }

    /// Largest number of cycles held at once.
    pub fn peak_buffered_cycles(&self) -> usize {
        self.peak_buffered
    }

    pub fn stage_times(&self) -> &StageTimes {
        &self.times
    }

    /// Feeds raw samples; returns events whose windows completed.
    pub fn push_samples(&mut self, voltage: &[f64], current: &[f64]) -> Result<Vec<ExtractedEvent>> {
        let mut out = Vec::new();
        let mut cycle_time = Duration::ZERO;
        let start = Instant::now();
        for (&v, &i) in voltage.iter().zip(current) {
            if let Some(cycle) = self.resampler.push(v, i) {
                let t = Instant::now();
                self.push_cycle(cycle, &mut out)?;
                cycle_time += t.elapsed();
            }
        }
        self.times.fitps += start.elapsed().saturating_sub(cycle_time);
        Ok(out)
    }

    /// Feeds one resampled cycle.
    pub fn push_cycle(&mut self, cycle: Cycle, out: &mut Vec<ExtractedEvent>) -> Result<()> {
        let k = self.next_cycle;
        self.next_cycle += 1;
        let t = Instant::now();
        let fired = self.detector.step(k, active_power(&cycle));
        self.times.detect += t.elapsed();

        self.queue.push_back((k, cycle.i));
        if let Some(event) = fired {
            self.pending.push_back(Pending {
                event,
                time_s: cycle.start / self.sample_rate_hz,
            });
        }
        self.peak_buffered = self.peak_buffered.max(self.queue.len());

        let n_a = self.config.cycles_after;
        while let Some(p) = self.pending.front().copied() {
            if k + 1 < p.event.cycle_index + n_a {
                break;
            }
            self.pending.pop_front();
            out.push(self.complete(p, n_a)?);
        }
        self.trim();
        Ok(())
    }

    /// Flushes windows left open at the end of the stream as partial events.
    pub fn finish(&mut self) -> Result<Vec<ExtractedEvent>> {
        let mut out = Vec::new();
        while let Some(p) = self.pending.pop_front() {
            let available = self.next_cycle - p.event.cycle_index;
            out.push(self.complete(p, available)?);
        }
        self.trim();
        Ok(out)
    }

    fn cycle(&self, index: usize) -> Option<&Vec<f64>> {
        let first = self.queue.front()?.0;
        self.queue.get(index.checked_sub(first)?).map(|c| &c.1)
    }

    fn complete(&mut self, p: Pending, n_after: usize) -> Result<ExtractedEvent> {
        let ready_at = Instant::now();
        let k = p.event.cycle_index;
        let t = Instant::now();
        let before = match k.checked_sub(1).and_then(|b| self.cycle(b)) {
            Some(c) => c.clone(),
            None => vec![0.0; self.config.cycle_samples],
        };
        let after: Vec<Vec<f64>> = (k..k + n_after)
            .map(|j| self.cycle(j).cloned().expect("window cycles are queued"))
            .collect();
        let window = ActivationWindow::new(before, after)?;
        let signature = event_signature(&window, p.event.direction, self.config.cycles_after);
        self.times.signature += t.elapsed();

        let t = Instant::now();
        let features = self.analyzer.features(&signature.current)?;
        self.times.features += t.elapsed();
        Ok(ExtractedEvent {
            event: p.event,
            time_s: p.time_s,
            signature,
            features,
            ready_at,
        })
    }

    fn trim(&mut self) {
        let keep_from = match self.pending.front() {
            Some(p) => p.event.cycle_index.saturating_sub(CYCLES_BEFORE),
            None => self.next_cycle.saturating_sub(1),
        };
        while self.queue.front().is_some_and(|c| c.0 < keep_from) {
            self.queue.pop_front();
        }
    }
}

/// Extracts every event of a complete stream, partial ones included.
pub fn extract_events(stream: &RawStream, config: &PipelineConfig) -> Result<Vec<ExtractedEvent>> {
    let mut ex = EventExtractor::new(*config, stream.sample_rate_hz)?;
    let mut events = ex.push_samples(&stream.voltage, &stream.current)?;
    events.extend(ex.finish()?);
    if ex.cycles_seen() == 0 {
        return Err(Error::InsufficientSignal {
            found: ex.resampler.crossings_seen(),
        });
    }
    Ok(events)
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedEvent {
    pub event: Event,
    pub time_s: f64,
    pub label: String,
    pub class_index: usize,
    /// Class probabilities in model class order.
    pub proba: Vec<f64>,
    pub features: FeatureVector,
    pub explanation: Option<Explanation>,
    /// Compute time from window completion to emission, seconds.
    pub tau_s: f64,
    /// Recording time of the window plus `tau_s`.
    pub delta_t_s: f64,
    pub n_a_used: usize,
    pub partial: bool,
}

impl ClassifiedEvent {
    /// One JSON object with keys in a fixed order.
    pub fn to_json(&self, classes: &[String]) -> Value {
        let mut obj = Map::new();
        obj.insert("cycle".into(), self.event.cycle_index.into());
        obj.insert("time_s".into(), self.time_s.into());
        obj.insert(
            "direction".into(),
            match self.event.direction {
                Direction::On => "on",
                Direction::Off => "off",
            }
            .into(),
        );
        obj.insert("z".into(), self.event.z_score.into());
        obj.insert("delta_p_w".into(), self.event.delta_p.into());
        obj.insert("label".into(), self.label.clone().into());
        let proba: Map<String, Value> = classes
            .iter()
            .zip(&self.proba)
            .map(|(c, p)| (c.clone(), (*p).into()))
            .collect();
        obj.insert("proba".into(), proba.into());
        let features: Map<String, Value> = FEATURE_NAMES
            .iter()
            .zip(&self.features.0)
            .map(|(n, v)| (n.to_string(), (*v).into()))
            .collect();
        obj.insert("features".into(), features.into());
        let shap = match &self.explanation {
            Some(e) => FEATURE_NAMES
                .iter()
                .zip(&e.phi)
                .map(|(n, v)| (n.to_string(), Value::from(*v)))
                .collect::<Map<String, Value>>()
                .into(),
            None => Value::Null,
        };
        obj.insert("shap".into(), shap);
        obj.insert("tau_s".into(), self.tau_s.into());
        obj.insert("delta_t_s".into(), self.delta_t_s.into());
        obj.insert("partial".into(), self.partial.into());
        Value::Object(obj)
    }
}

/// Renders events as JSON lines.
pub fn events_jsonl(events: &[ClassifiedEvent], classes: &[String]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_json(classes).to_string());
        out.push('\n');
    }
    out
}

/// A trained model bound to pipeline settings.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    model: GbdtModel,
    background: Option<BackgroundSet>,
}

impl Pipeline {
    /// `background` is required when explanations are enabled.
    pub fn new(config: PipelineConfig, model: GbdtModel, background: Option<BackgroundSet>) -> Result<Self> {
        config.validate()?;
        if model.feature_names().iter().map(String::as_str).ne(FEATURE_NAMES) {
            return Err(Error::Model(format!(
                "pipeline model must use features {FEATURE_NAMES:?}"
            )));
        }
        if config.explain && background.is_none() {
            return Err(Error::Domain("explanations need a background set".into()));
        }
        Ok(Pipeline {
            config,
            model,
            background,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn model(&self) -> &GbdtModel {
        &self.model
    }

    pub fn session(&self, sample_rate_hz: f64) -> Result<Session<'_>> {
        Ok(Session {
            pipeline: self,
            extractor: EventExtractor::new(self.config, sample_rate_hz)?,
            predict_explain: StageTimes::default(),
        })
    }

    /// Classifies (and optionally explains) one extracted event.
    pub fn classify(&self, ex: ExtractedEvent, times: &mut StageTimes) -> Result<ClassifiedEvent> {
        let t = Instant::now();
        let proba = self.model.predict_proba(&ex.features.0)?;
        let class_index = argmax(&proba);
        times.predict += t.elapsed();

        let explanation = match (&self.background, self.config.explain) {
            (Some(bg), true) => {
                let t = Instant::now();
                let e = shapley(&self.model, &ex.features.0, bg, class_index, OutputMode::ClassScore)?;
                times.explain += t.elapsed();
                Some(e)
            }
            _ => None,
        };
        let tau_s = if self.config.timing {
            ex.ready_at.elapsed().as_secs_f64()
        } else {
            0.0
        };
        Ok(ClassifiedEvent {
            event: ex.event,
            time_s: ex.time_s,
            label: self.model.classes()[class_index].clone(),
            class_index,
            proba,
            features: ex.features,
            explanation,
            tau_s,
            delta_t_s: self.config.recording_latency_s() + tau_s,
            n_a_used: ex.signature.n_a_used,
            partial: ex.signature.partial,
        })
    }

    pub fn run_stream(&self, stream: &RawStream) -> Result<Vec<ClassifiedEvent>> {
        self.run_stream_timed(stream).map(|(events, _)| events)
    }

    /// Runs a whole stream and returns per-stage wall times alongside.
    pub fn run_stream_timed(&self, stream: &RawStream) -> Result<(Vec<ClassifiedEvent>, StageTimes)> {
        let mut session = self.session(stream.sample_rate_hz)?;
        let mut events = session.push_samples(&stream.voltage, &stream.current)?;
        events.extend(session.finish()?);
        if session.extractor.cycles_seen() == 0 {
            return Err(Error::InsufficientSignal {
                found: session.extractor.resampler.crossings_seen(),
            });
        }
        let times = session.stage_times();
        Ok((events, times))
    }
}

/// Incremental processing of one stream.
#[derive(Debug)]
pub struct Session<'a> {
    pipeline: &'a Pipeline,
    extractor: EventExtractor,
    predict_explain: StageTimes,
}

impl Session<'_> {
    pub fn push_samples(&mut self, voltage: &[f64], current: &[f64]) -> Result<Vec<ClassifiedEvent>> {
        let extracted = self.extractor.push_samples(voltage, current)?;
        self.classify_all(extracted)
    }

    pub fn finish(&mut self) -> Result<Vec<ClassifiedEvent>> {
        let extracted = self.extractor.finish()?;
        self.classify_all(extracted)
    }

    fn classify_all(&mut self, extracted: Vec<ExtractedEvent>) -> Result<Vec<ClassifiedEvent>> {
        extracted
            .into_iter()
            .map(|e| self.pipeline.classify(e, &mut self.predict_explain))
            .collect()
    }

    pub fn peak_buffered_cycles(&self) -> usize {
        self.extractor.peak_buffered_cycles()
    }

    pub fn stage_times(&self) -> StageTimes {
        let mut t = *self.extractor.stage_times();
        t.add(&self.predict_explain);
        t
    }
}

// ---------------------------------------------------------------------------
// Benchmarking
// ---------------------------------------------------------------------------

/// Signature-plus-feature time at cycle lengths `T` and `2T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingProbe {
    pub cycle_samples: usize,
    pub seconds: f64,
    pub doubled_seconds: f64,
}

impl ScalingProbe {
    pub fn ratio(&self) -> f64 {
        self.doubled_seconds / self.seconds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub repetitions: usize,
    pub events_per_run: usize,
    /// Mean wall time per run, by stage.
    pub stages: StageTimes,
    /// Every measured `tau`, seconds.
    pub tau_s: Vec<f64>,
    pub median_tau_s: f64,
    pub p95_tau_s: f64,
    pub recording_latency_s: f64,
    /// Recording latency plus median `tau`.
    pub delta_t_s: f64,
    pub scaling: ScalingProbe,
    pub complexity: String,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "runs: {}  events per run: {}",
            self.repetitions, self.events_per_run
        );
        let _ = writeln!(out, "stage       mean ms/run");
        for (name, d) in self.stages.named() {
            let _ = writeln!(out, "{name:<11} {:.3}", d.as_secs_f64() * 1e3);
        }
        let _ = writeln!(
            out,
            "tau median {:.3} ms, p95 {:.3} ms",
            self.median_tau_s * 1e3,
            self.p95_tau_s * 1e3
        );
        let _ = writeln!(
            out,
            "delta_t = {:.4} s recording + {:.4} s tau = {:.4} s",
            self.recording_latency_s, self.median_tau_s, self.delta_t_s
        );
        let _ = writeln!(
            out,
            "signature+features at T={}: {:.1} us, T={}: {:.1} us, ratio {:.2}",
            self.scaling.cycle_samples,
            self.scaling.seconds * 1e6,
            self.scaling.cycle_samples * 2,
            self.scaling.doubled_seconds * 1e6,
            self.scaling.ratio()
        );
        out.push_str(&self.complexity);
        out
    }
}

/// Median (mean of the middle pair for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = (q * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Per-stage cost model of the streaming path.
pub fn complexity_table(config: &PipelineConfig, model: &GbdtModel, background: usize) -> String {
    let t = config.cycle_samples;
    let n_a = config.cycles_after;
    let rows = [
        ("fitps", "O(T) per cycle".to_string(), format!("T={t}")),
        ("detect", "O(w) per cycle".to_string(), format!("w={}", config.detector.window)),
        (
            "signature",
            "O(T N_a log N_a) per event".to_string(),
            format!("T N_a={}", t * n_a),
        ),
        ("features", "O(T log T) per event".to_string(), format!("T={t}")),
        (
            "predict",
            "O(K E D) per event".to_string(),
            format!("K E={}, D={}", model.trees().len(), model.max_depth()),
        ),
        (
            "explain",
            "O(E B 2^F) per event".to_string(),
            format!("E={}, B={background}, F={}", model.rounds(), model.n_features()),
        ),
    ];
    let mut out = String::from("stage       complexity                    size\n");
    for (stage, cost, size) in rows {
        let _ = writeln!(out, "{stage:<11} {cost:<29} {size}");
    }
    out.push_str("overall     O(T N_a log(T N_a)) per event\n");
    out
}

/// Times signature estimation plus feature extraction on synthetic windows
/// of `cycle_samples` and twice that, taking the fastest of `reps` runs.
pub fn scaling_probe(cycle_samples: usize, cycles_after: usize, reps: usize) -> Result<ScalingProbe> {
    let time_at = |t: usize| -> Result<f64> {
        let analyzer = HarmonicAnalyzer::new(t);
        let wave = |scale: f64, k: usize| -> Vec<f64> {
            (0..t)
                .map(|m| {
                    let th = std::f64::consts::TAU * m as f64 / t as f64;
                    scale * (th - 1.2).cos() + 0.3 * (3.0 * th + 0.4 + k as f64 * 1e-3).cos()
                })
                .collect()
        };
        let window = ActivationWindow::new(
            wave(1.0, 0),
            (0..cycles_after).map(|k| wave(2.0, k)).collect(),
        )?;
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let start = Instant::now();
            for _ in 0..20 {
                let sig = event_signature(&window, Direction::On, cycles_after);
                std::hint::black_box(analyzer.features(&sig.current)?);
            }
            best = best.min(start.elapsed().as_secs_f64() / 20.0);
        }
        Ok(best)
    };
    Ok(ScalingProbe {
        cycle_samples,
        seconds: time_at(cycle_samples)?,
        doubled_seconds: time_at(cycle_samples * 2)?,
    })
}

/// Runs the stream `repetitions` times and summarizes latency.
pub fn bench(pipeline: &Pipeline, stream: &RawStream, repetitions: usize) -> Result<BenchReport> {
    let repetitions = repetitions.max(1);
    let mut timed = *pipeline.config();
    timed.timing = true;
    let runner = Pipeline {
        config: timed,
        ..pipeline.clone()
    };
    let mut stages = StageTimes::default();
    let mut tau = Vec::new();
    let mut events_per_run = 0;
    for _ in 0..repetitions {
        let (events, times) = runner.run_stream_timed(stream)?;
        if events.is_empty() {
            return Err(Error::Domain("benchmark stream contains no events".into()));
        }
        events_per_run = events.len();
        tau.extend(events.iter().map(|e| e.tau_s));
        stages.add(&times);
    }
    let per_run = |d: Duration| d / repetitions as u32;
    let stages = StageTimes {
        fitps: per_run(stages.fitps),
        detect: per_run(stages.detect),
        signature: per_run(stages.signature),
        features: per_run(stages.features),
        predict: per_run(stages.predict),
        explain: per_run(stages.explain),
    };
    let median_tau_s = median(&tau);
    let background = runner.background.as_ref().map_or(0, BackgroundSet::len);
    Ok(BenchReport {
        repetitions,
        events_per_run,
        stages,
        p95_tau_s: percentile(&tau, 0.95),
        median_tau_s,
        recording_latency_s: timed.recording_latency_s(),
        delta_t_s: timed.recording_latency_s() + median_tau_s,
        scaling: scaling_probe(timed.cycle_samples, timed.cycles_after, 5)?,
        complexity: complexity_table(&timed, &runner.model, background),
        tau_s: tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::{GbdtConfig, Tree};
    use crate::ingest::{synthesize, ApplianceArchetype, ScenarioSpec};

    fn archetypes() -> Vec<ApplianceArchetype> {
        vec![
            ApplianceArchetype::steady("heater", vec![(1, 8.0, -1.5707963)]),
            ApplianceArchetype::steady("motor", vec![(1, 3.0, -0.9), (3, 0.6, 0.5)]),
        ]
    }

    fn spec(schedule: Vec<(f64, &str, Direction)>, duration: f64, grid_hz: f64) -> ScenarioSpec {
        let mut s = ScenarioSpec::new(duration, 1);
        s.archetypes = archetypes();
        s.schedule = schedule
            .into_iter()
            .map(|(t, id, d)| (t, id.to_string(), d))
            .collect();
        s.grid_frequency_hz = grid_hz;
        s
    }

    /// Class 0 = heater, 1 = motor; decides on a1 alone.
    fn model() -> GbdtModel {
        GbdtModel::from_trees(
            vec!["heater".into(), "motor".into()],
            crate::gbdt::fourier_feature_names(),
            &GbdtConfig::default(),
            vec![Tree::stump(0, 5.5, -2.0, 2.0), Tree::stump(0, 5.5, 2.0, -2.0)],
        )
        .unwrap()
    }

    fn pipeline(config: PipelineConfig) -> Pipeline {
        let bg = BackgroundSet::new(vec![vec![0.0; 8], vec![10.0; 8]]).unwrap();
        Pipeline::new(config, model(), Some(bg)).unwrap()
    }

    #[test]
    fn single_turn_on_is_classified() {
        let (stream, _) = synthesize(&spec(vec![(0.5, "heater", Direction::On)], 1.0, 60.0)).unwrap();
        let events = pipeline(PipelineConfig::default()).run_stream(&stream).unwrap();
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!(e.label, "heater");
        assert_eq!(e.event.direction, Direction::On);
        assert!(!e.partial);
        assert_eq!(e.n_a_used, 18);
        assert!((e.features.a1() - 8.0).abs() < 0.05);
        assert!((e.time_s - 0.5).abs() < 1.0 / 60.0 + 1e-9);
        assert!((e.proba.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.delta_t_s > 19.0 / 60.0);
    }

    #[test]
    fn turn_off_signature_matches_turn_on() {
        let schedule = vec![(0.5, "motor", Direction::On), (1.2, "motor", Direction::Off)];
        let (stream, _) = synthesize(&spec(schedule, 2.0, 60.0)).unwrap();
        let events = pipeline(PipelineConfig::default()).run_stream(&stream).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].event.direction, Direction::Off);
        assert!(events.iter().all(|e| e.label == "motor"));
        for (a, b) in events[0].features.0.iter().zip(&events[1].features.0) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_load_has_no_events() {
        let mut s = spec(vec![(0.0, "heater", Direction::On)], 3.0, 60.0);
        s.noise_snr_db = Some(40.0);
        let (stream, _) = synthesize(&s).unwrap();
        assert!(pipeline(PipelineConfig::default()).run_stream(&stream).unwrap().is_empty());
    }

    #[test]
    fn latency_at_fifty_hertz() {
        let config = PipelineConfig {
            grid_hz: 50.0,
            explain: true,
            ..PipelineConfig::default()
        };
        let (stream, _) = synthesize(&spec(vec![(0.5, "motor", Direction::On)], 1.5, 50.0)).unwrap();
        let events = pipeline(config).run_stream(&stream).unwrap();
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert!((e.delta_t_s - (0.38 + e.tau_s)).abs() < 1e-12);
        assert!(e.tau_s >= 0.0);
        let x = e.explanation.as_ref().unwrap();
        assert!(x.efficiency_gap().abs() < 1e-9);
    }

    #[test]
    fn stream_ending_inside_window_gives_partial_event() {
        // 10 cycles of the heater before the stream ends
        let (stream, _) = synthesize(&spec(vec![(1.0, "heater", Direction::On)], 1.0 + 10.0 / 60.0, 60.0)).unwrap();
        let events = pipeline(PipelineConfig::default()).run_stream(&stream).unwrap();
        assert_eq!(events.len(), 1);
        assert!(events[0].partial);
        assert!(events[0].n_a_used < 18 && events[0].n_a_used >= 8);
        assert_eq!(events[0].label, "heater");
    }

    #[test]
    fn memory_is_bounded_and_independent_of_length() {
        let mut schedule = Vec::new();
        let mut t = 0.3;
        let mut on = false;
        while t < 19.5 {
            schedule.push((t, "heater", if on { Direction::Off } else { Direction::On }));
            on = !on;
            t += 0.2;
        }
        let (stream, _) = synthesize(&spec(schedule.clone(), 20.0, 60.0)).unwrap();
        let p = pipeline(PipelineConfig::default());
        let mut session = p.session(stream.sample_rate_hz).unwrap();
        let mut count = 0;
        for (v, i) in stream.voltage.chunks(997).zip(stream.current.chunks(997)) {
            count += session.push_samples(v, i).unwrap().len();
        }
        count += session.finish().unwrap().len();
        assert_eq!(count, schedule.len());
        let config = PipelineConfig::default();
        assert!(session.peak_buffered_cycles() <= config.cycles_after + config.detector.window + 2);
    }

    #[test]
    fn chunked_and_whole_runs_agree() {
        let schedule = vec![(0.4, "heater", Direction::On), (0.9, "motor", Direction::On)];
        let (stream, _) = synthesize(&spec(schedule, 1.6, 60.0)).unwrap();
        let config = PipelineConfig {
            timing: false,
            explain: true,
            ..PipelineConfig::default()
        };
        let p = pipeline(config);
        let whole = p.run_stream(&stream).unwrap();
        let mut session = p.session(stream.sample_rate_hz).unwrap();
        let mut chunked = Vec::new();
        for (v, i) in stream.voltage.chunks(123).zip(stream.current.chunks(123)) {
            chunked.extend(session.push_samples(v, i).unwrap());
        }
        chunked.extend(session.finish().unwrap());
        assert_eq!(whole, chunked);
        let classes = p.model().classes().to_vec();
        assert_eq!(events_jsonl(&whole, &classes), events_jsonl(&p.run_stream(&stream).unwrap(), &classes));
    }

    #[test]
    fn jsonl_has_expected_keys_in_order() {
        let (stream, _) = synthesize(&spec(vec![(0.5, "heater", Direction::On)], 1.0, 60.0)).unwrap();
        let p = pipeline(PipelineConfig::default());
        let events = p.run_stream(&stream).unwrap();
        let line = events_jsonl(&events, p.model().classes());
        let v: Value = serde_json::from_str(line.trim()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            [
                "cycle", "time_s", "direction", "z", "delta_p_w", "label", "proba", "features", "shap",
                "tau_s", "delta_t_s", "partial"
            ]
        );
        assert_eq!(v["direction"], "on");
        assert!(v["shap"].is_null());
        assert_eq!(v["features"].as_object().unwrap().len(), 8);
    }

    #[test]
    fn explain_without_background_is_rejected() {
        let config = PipelineConfig {
            explain: true,
            ..PipelineConfig::default()
        };
        assert!(Pipeline::new(config, model(), None).is_err());
        let bad = PipelineConfig {
            grid_hz: 55.0,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bench_reports_requested_repetitions() {
        let (stream, _) = synthesize(&spec(vec![(0.5, "motor", Direction::On)], 1.0, 60.0)).unwrap();
        let report = bench(&pipeline(PipelineConfig::default()), &stream, 10).unwrap();
        assert_eq!(report.tau_s.len(), 10);
        assert_eq!(report.events_per_run, 1);
        assert!(report.median_tau_s <= report.p95_tau_s);
        assert!(report.render().contains("overall"));
        let (quiet, _) = synthesize(&spec(vec![], 0.5, 60.0)).unwrap();
        assert!(bench(&pipeline(PipelineConfig::default()), &quiet, 1).is_err());
    }

    #[test]
    fn median_and_percentile() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }
}
