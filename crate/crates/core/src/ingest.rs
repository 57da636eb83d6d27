//! Waveform and annotation input.
//!
//! Two sources feed the engine: two-column waveform CSV files with a JSON
//! metadata document describing annotated on/off events, and a deterministic
//! generator of aggregated scenarios built from appliance archetypes. The
//! generator exists so that every downstream stage can be checked against a
//! ground truth known by construction.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling rate of the PLAID recordings.
pub const PLAID_SAMPLE_RATE_HZ: f64 = 30_000.0;

/// Appliance types annotated in the aggregated PLAID recordings.
pub const APPLIANCE_VOCABULARY: [&str; 13] = [
    "Air Conditioner",
    "Blender",
    "Coffee maker",
    "Compact Fluorescent Lamp",
    "Fan",
    "Fridge",
    "Hairdryer",
    "Heater",
    "Incandescent Light Bulb",
    "Laptop",
    "Microwave",
    "Soldering Iron",
    "Vacuum",
];

/// Synthetic voltage peak (about 120 V RMS).
pub const DEFAULT_VOLTAGE_PEAK: f64 = 170.0;

// ---------------------------------------------------------------------------
// Raw streams
// ---------------------------------------------------------------------------

/// A recorded (or synthesized) pair of current and voltage sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStream {
    /// Instantaneous current in amperes.
    pub current: Vec<f64>,
    /// Instantaneous voltage in volts.
    pub voltage: Vec<f64>,
    pub sample_rate_hz: f64,
    pub source_id: String,
}

impl RawStream {
    pub fn new(
        current: Vec<f64>,
        voltage: Vec<f64>,
        sample_rate_hz: f64,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Domain(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if current.len() != voltage.len() {
            return Err(Error::Domain(format!(
                "current has {} samples but voltage has {}",
                current.len(),
                voltage.len()
            )));
        }
        Ok(RawStream {
            current,
            voltage,
            sample_rate_hz,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz
    }
}

/// Column layout of a two-column waveform CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnOrder {
    #[default]
    CurrentFirst,
    VoltageFirst,
}

impl std::str::FromStr for ColumnOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "current_first" | "current-first" => Ok(ColumnOrder::CurrentFirst),
            "voltage_first" | "voltage-first" => Ok(ColumnOrder::VoltageFirst),
            other => Err(format!(
                "unknown column order `{other}` (expected current_first or voltage_first)"
            )),
        }
    }
}

/// Reads a two-column waveform CSV at the PLAID sampling rate.
pub fn read_plaid_stream(path: impl AsRef<Path>, order: ColumnOrder) -> Result<RawStream> {
    read_stream(path, order, PLAID_SAMPLE_RATE_HZ)
}

/// Reads a two-column waveform CSV with an explicit sampling rate.
///
/// An optional single header line is accepted; both LF and CRLF line endings
/// are accepted. The file stem becomes the stream's `source_id`.
pub fn read_stream(
    path: impl AsRef<Path>,
    order: ColumnOrder,
    sample_rate_hz: f64,
) -> Result<RawStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_stream(&text, order, sample_rate_hz, source_id, path)
}

fn parse_stream(
    text: &str,
    order: ColumnOrder,
    sample_rate_hz: f64,
    source_id: String,
    path: &Path,
) -> Result<RawStream> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut seen_row = false;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        match parse_row(line) {
            Ok((a, b)) => {
                first.push(a);
                second.push(b);
            }
            // a single non-numeric first line is a header
            Err(_) if !seen_row && line_no == 1 => {}
            Err(message) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message,
                })
            }
        }
        seen_row = true;
    }
    if first.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    let (current, voltage) = match order {
        ColumnOrder::CurrentFirst => (first, second),
        ColumnOrder::VoltageFirst => (second, first),
    };
    RawStream::new(current, voltage, sample_rate_hz, source_id)
}

fn parse_row(line: &str) -> std::result::Result<(f64, f64), String> {
    let mut fields = line.split(',').map(str::trim);
    let a = fields.next().unwrap_or("");
    let b = fields
        .next()
        .ok_or_else(|| format!("expected 2 columns, found 1: `{line}`"))?;
    if fields.next().is_some() {
        return Err(format!("expected 2 columns, found more: `{line}`"));
    }
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| format!("non-numeric value `{s}`"))
    };
    Ok((parse(a)?, parse(b)?))
}

/// Writes a stream as a two-column CSV with a `current,voltage` (or
/// `voltage,current`) header.
pub fn write_stream_csv(
    stream: &RawStream,
    path: impl AsRef<Path>,
    order: ColumnOrder,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        match order {
            ColumnOrder::CurrentFirst => {
                writeln!(out, "current,voltage")?;
                for (i, v) in stream.current.iter().zip(&stream.voltage) {
                    writeln!(out, "{i},{v}")?;
                }
            }
            ColumnOrder::VoltageFirst => {
                writeln!(out, "voltage,current")?;
                for (i, v) in stream.current.iter().zip(&stream.voltage) {
                    writeln!(out, "{v},{i}")?;
                }
            }
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    On,
    Off,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::On => "on",
            Direction::Off => "off",
        })
    }
}

/// An annotated appliance switching event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledEvent {
    pub sample_index: usize,
    pub direction: Direction,
    /// Appliance type. Labels outside [`APPLIANCE_VOCABULARY`] are kept as-is.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamMetadata {
    pub id: String,
    pub sample_rate_hz: u32,
    pub events: Vec<LabeledEvent>,
}

/// Metadata document: `{ "streams": [ { "id", "sample_rate_hz", "events" } ] }`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub streams: Vec<StreamMetadata>,
}

/// A problem with an annotation that does not invalidate the document.
#[derive(Debug, Clone, PartialEq)]
pub enum EventWarning {
    IndexBeyondStream {
        source_id: String,
        sample_index: usize,
        stream_len: usize,
    },
    UnknownLabel {
        source_id: String,
        label: String,
    },
}

impl fmt::Display for EventWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventWarning::IndexBeyondStream {
                source_id,
                sample_index,
                stream_len,
            } => write!(
                f,
                "{source_id}: event at sample {sample_index} lies beyond the stream ({stream_len} samples)"
            ),
            EventWarning::UnknownLabel { source_id, label } => {
                write!(f, "{source_id}: label `{label}` is not a known appliance type")
            }
        }
    }
}

impl Metadata {
    pub fn events_by_source(&self) -> BTreeMap<String, Vec<LabeledEvent>> {
        self.streams
            .iter()
            .map(|s| (s.id.clone(), s.events.clone()))
            .collect()
    }

    pub fn stream(&self, id: &str) -> Option<&StreamMetadata> {
        self.streams.iter().find(|s| s.id == id)
    }

    /// Labels that are not part of [`APPLIANCE_VOCABULARY`].
    pub fn unknown_labels(&self) -> Vec<EventWarning> {
        let mut out = Vec::new();
        for s in &self.streams {
            for e in &s.events {
                if !APPLIANCE_VOCABULARY.contains(&e.label.as_str()) {
                    out.push(EventWarning::UnknownLabel {
                        source_id: s.id.clone(),
                        label: e.label.clone(),
                    });
                }
            }
        }
        out
    }
}

/// Reads a metadata JSON document. Missing or unexpected keys are schema errors.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<Metadata> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn write_metadata(meta: &Metadata, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Schema(format!("cannot serialize metadata: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Checks events against the length of the stream they annotate. Out-of-range
/// events are reported but stay in the list.
pub fn validate_events(
    source_id: &str,
    events: &[LabeledEvent],
    stream_len: usize,
) -> Vec<EventWarning> {
    events
        .iter()
        .filter(|e| e.sample_index >= stream_len)
        .map(|e| EventWarning::IndexBeyondStream {
            source_id: source_id.to_string(),
            sample_index: e.sample_index,
            stream_len,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic scenarios
// ---------------------------------------------------------------------------

/// One harmonic term `(order n, amplitude a_n in amperes, phase phi_n in radians)`.
pub type HarmonicTerm = (u32, f64, f64);

/// A synthetic appliance: a steady current waveform made of harmonics of the
/// voltage phase, optionally scaled by a decaying start-up gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceArchetype {
    pub archetype_id: String,
    pub harmonic_spec: Vec<HarmonicTerm>,
    #[serde(default)]
    pub transient_cycles: u32,
    #[serde(default = "unit_gain")]
    pub transient_gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl ApplianceArchetype {
    pub fn steady(id: impl Into<String>, harmonic_spec: Vec<HarmonicTerm>) -> Self {
        ApplianceArchetype {
            archetype_id: id.into(),
            harmonic_spec,
            transient_cycles: 0,
            transient_gain: 1.0,
        }
    }

    pub fn with_transient(mut self, cycles: u32, gain: f64) -> Self {
        self.transient_cycles = cycles;
        self.transient_gain = gain;
        self
    }

    /// Steady-state current at voltage phase `theta`.
    pub fn current_at(&self, theta: f64) -> f64 {
        self.harmonic_spec
            .iter()
            .map(|&(n, a, phi)| a * (n as f64 * theta + phi).cos())
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let id = &self.archetype_id;
        let mut orders: Vec<u32> = self.harmonic_spec.iter().map(|h| h.0).collect();
        orders.sort_unstable();
        if orders.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Scenario(format!(
                "archetype `{id}` repeats a harmonic order"
            )));
        }
        for &(n, a, phi) in &self.harmonic_spec {
            if n == 0 {
                return Err(Error::Scenario(format!(
                    "archetype `{id}`: harmonic orders start at 1"
                )));
            }
            if !(a >= 0.0 && a.is_finite()) || !phi.is_finite() {
                return Err(Error::Scenario(format!(
                    "archetype `{id}`: harmonic {n} needs a finite amplitude >= 0 and finite phase"
                )));
            }
        }
        if !(self.transient_gain >= 1.0 && self.transient_gain.is_finite()) {
            return Err(Error::Scenario(format!(
                "archetype `{id}`: transient_gain must be >= 1"
            )));
        }
        Ok(())
    }
}

/// A scheduled switching action `(time_s, archetype_id, direction)`.
pub type ScheduledSwitch = (f64, String, Direction);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub archetypes: Vec<ApplianceArchetype>,
    pub schedule: Vec<ScheduledSwitch>,
    pub duration_s: f64,
    /// Signal-to-noise ratio of the aggregate current; `None` means noise-free.
    #[serde(default)]
    pub noise_snr_db: Option<f64>,
    pub grid_frequency_hz: f64,
    /// Peak deviation of the grid frequency from `grid_frequency_hz`.
    #[serde(default)]
    pub frequency_drift_hz: f64,
    pub seed: u64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_voltage_peak")]
    pub voltage_peak: f64,
}

fn default_sample_rate() -> f64 {
    PLAID_SAMPLE_RATE_HZ
}

fn default_voltage_peak() -> f64 {
    DEFAULT_VOLTAGE_PEAK
}

impl ScenarioSpec {
    /// A scenario with no appliances, 60 Hz, PLAID sampling rate.
    pub fn new(duration_s: f64, seed: u64) -> Self {
        ScenarioSpec {
            archetypes: Vec::new(),
            schedule: Vec::new(),
            duration_s,
            noise_snr_db: None,
            grid_frequency_hz: 60.0,
            frequency_drift_hz: 0.0,
            seed,
            sample_rate_hz: PLAID_SAMPLE_RATE_HZ,
            voltage_peak: DEFAULT_VOLTAGE_PEAK,
        }
    }

    /// A single-appliance recording: the archetype is switched on at t = 0
    /// and stays on, mirroring an individually metered measurement.
    pub fn submetered(&self, archetype: &ApplianceArchetype, duration_s: f64, seed: u64) -> Self {
        ScenarioSpec {
            archetypes: vec![archetype.clone()],
            schedule: vec![(0.0, archetype.archetype_id.clone(), Direction::On)],
            duration_s,
            seed,
            ..self.clone()
        }
    }

    pub fn sample_count(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    /// Instantaneous voltage phase at time `t`.
    ///
    /// The grid frequency follows `f0 - d * cos(2 pi t / duration)`, so it
    /// sweeps from `f0 - d` up to `f0 + d` and back once per scenario.
    pub fn phase_at(&self, t: f64) -> f64 {
        let f0 = self.grid_frequency_hz;
        let d = self.frequency_drift_hz;
        let span = self.duration_s;
        2.0 * PI * f0 * t - d * span * (2.0 * PI * t / span).sin()
    }

    fn switch_index(&self, t: f64) -> usize {
        // first sample at or after t; guard against t*fs landing a hair above an integer
        let x = t * self.sample_rate_hz;
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r as usize
        } else {
            x.ceil() as usize
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.duration_s) {
            return Err(Error::Scenario("duration_s must be positive".into()));
        }
        if !positive(self.sample_rate_hz) {
            return Err(Error::Scenario("sample_rate_hz must be positive".into()));
        }
        if !positive(self.grid_frequency_hz) {
            return Err(Error::Scenario("grid_frequency_hz must be positive".into()));
        }
        if !(self.frequency_drift_hz >= 0.0 && self.frequency_drift_hz < self.grid_frequency_hz)
        {
            return Err(Error::Scenario(
                "frequency_drift_hz must lie in [0, grid_frequency_hz)".into(),
            ));
        }
        if !positive(self.voltage_peak) {
            return Err(Error::Scenario("voltage_peak must be positive".into()));
        }
        if let Some(snr) = self.noise_snr_db {
            if !snr.is_finite() {
                return Err(Error::Scenario("noise_snr_db must be finite".into()));
            }
        }
        let mut ids: Vec<&str> = Vec::new();
        for a in &self.archetypes {
            a.validate()?;
            if ids.contains(&a.archetype_id.as_str()) {
                return Err(Error::Scenario(format!(
                    "duplicate archetype id `{}`",
                    a.archetype_id
                )));
            }
            ids.push(&a.archetype_id);
        }
        let n = self.sample_count();
        let mut state: BTreeMap<&str, (f64, Direction)> = BTreeMap::new();
        for (t, id, dir) in &self.schedule {
            if !ids.contains(&id.as_str()) {
                return Err(Error::Scenario(format!(
                    "schedule references unknown archetype `{id}`"
                )));
            }
            if !(*t >= 0.0 && t.is_finite()) || self.switch_index(*t) >= n {
                return Err(Error::Scenario(format!(
                    "switch of `{id}` at {t} s lies outside the scenario"
                )));
            }
            match (state.get(id.as_str()), dir) {
                (Some(&(prev, _)), _) if *t <= prev => {
                    return Err(Error::Scenario(format!(
                        "schedule times for `{id}` are not strictly increasing"
                    )))
                }
                (Some(&(_, Direction::On)), Direction::On) => {
                    return Err(Error::Scenario(format!(
                        "overlapping on intervals for `{id}` at {t} s"
                    )))
                }
                (None | Some(&(_, Direction::Off)), Direction::Off) => {
                    return Err(Error::Scenario(format!(
                        "`{id}` switched off at {t} s while not on"
                    )))
                }
                _ => {}
            }
            state.insert(id, (*t, *dir));
        }
        Ok(())
    }
}

/// Renders a scenario into an aggregated stream and its ground-truth events.
///
/// The output is a pure function of the scenario: equal scenarios (including the
/// seed) yield bit-identical streams.
pub fn synthesize(spec: &ScenarioSpec) -> Result<(RawStream, Vec<LabeledEvent>)> {
    spec.validate()?;
    let n = spec.sample_count();
    let fs = spec.sample_rate_hz;
    let theta: Vec<f64> = (0..n).map(|k| spec.phase_at(k as f64 / fs)).collect();
    let voltage: Vec<f64> = theta.iter().map(|&th| spec.voltage_peak * th.sin()).collect();
    let mut current = vec![0.0; n];
    let mut events = Vec::new();

    for arch in &spec.archetypes {
        let mut on_at: Option<usize> = None;
        let mut intervals = Vec::new();
        for (t, id, dir) in &spec.schedule {
            if id != &arch.archetype_id {
                continue;
            }
            let idx = spec.switch_index(*t);
            events.push(LabeledEvent {
                sample_index: idx,
                direction: *dir,
                label: id.clone(),
            });
            match dir {
                Direction::On => on_at = Some(idx),
                Direction::Off => {
                    if let Some(start) = on_at.take() {
                        intervals.push((start, idx));
                    }
                }
            }
        }
        if let Some(start) = on_at {
            intervals.push((start, n));
        }
        for (start, end) in intervals {
            let theta_on = theta[start];
            for k in start..end {
                let mut gain = 1.0;
                if arch.transient_cycles > 0 {
                    let cycles = (theta[k] - theta_on) / (2.0 * PI);
                    let span = arch.transient_cycles as f64;
                    if cycles < span {
                        gain = arch.transient_gain + (1.0 - arch.transient_gain) * cycles / span;
                    }
                }
                current[k] += gain * arch.current_at(theta[k]);
            }
        }
    }
    events.sort_by_key(|e| e.sample_index);

    if let Some(snr_db) = spec.noise_snr_db {
        let rms = (current.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt();
        if rms > 0.0 {
            let sigma = rms / 10f64.powf(snr_db / 20.0);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for x in current.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
    }

    let stream = RawStream::new(current, voltage, fs, "synthetic")?;
    Ok((stream, events))
}

pub fn read_scenario(path: impl AsRef<Path>) -> Result<ScenarioSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resistive() -> ApplianceArchetype {
        ApplianceArchetype::steady("bulb", vec![(1, 1.0, 0.0)])
    }

    fn noisy_spec() -> ScenarioSpec {
        let mut spec = ScenarioSpec::new(0.5, 7);
        spec.archetypes = vec![
            resistive(),
            ApplianceArchetype::steady("fan", vec![(1, 0.5, -1.2), (3, 0.1, 0.4)])
                .with_transient(3, 2.0),
        ];
        spec.schedule = vec![
            (0.1, "bulb".into(), Direction::On),
            (0.2, "fan".into(), Direction::On),
            (0.3, "bulb".into(), Direction::Off),
        ];
        spec.noise_snr_db = Some(30.0);
        spec.frequency_drift_hz = 0.3;
        spec
    }

    #[test]
    fn parses_three_rows_current_first() {
        let s = parse_stream(
            "0.1,120\n0.2,119\n0.1,121",
            ColumnOrder::CurrentFirst,
            PLAID_SAMPLE_RATE_HZ,
            "x".into(),
            Path::new("x.csv"),
        )
        .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.current[1], 0.2);
        assert_eq!(s.voltage[2], 121.0);
        assert_eq!(s.sample_rate_hz, 30_000.0);
    }

    #[test]
    fn header_and_crlf_are_accepted() {
        let s = parse_stream(
            "voltage,current\r\n120,1\r\n-120,-1\r\n",
            ColumnOrder::VoltageFirst,
            1000.0,
            "x".into(),
            Path::new("x.csv"),
        )
        .unwrap();
        assert_eq!(s.current, vec![1.0, -1.0]);
        assert_eq!(s.voltage, vec![120.0, -120.0]);
    }

    #[test]
    fn non_numeric_row_reports_its_line() {
        let err = parse_stream(
            "1,1\n2,2\n3,3\n4,4\nfoo,5\n",
            ColumnOrder::CurrentFirst,
            1.0,
            "x".into(),
            Path::new("x.csv"),
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse_stream(
            "",
            ColumnOrder::CurrentFirst,
            1.0,
            "x".into(),
            Path::new("x.csv"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
        let err = parse_stream(
            "current,voltage\n",
            ColumnOrder::CurrentFirst,
            1.0,
            "x".into(),
            Path::new("x.csv"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn metadata_with_one_event() {
        let meta: Metadata = serde_json::from_str(
            r#"{"streams":[{"id":"a","sample_rate_hz":30000,
                "events":[{"sample_index":30000,"direction":"on","label":"Fridge"}]}]}"#,
        )
        .unwrap();
        let by_source = meta.events_by_source();
        assert_eq!(
            by_source["a"],
            vec![LabeledEvent {
                sample_index: 30000,
                direction: Direction::On,
                label: "Fridge".into()
            }]
        );
        assert!(meta.unknown_labels().is_empty());
    }

    #[test]
    fn metadata_edge_cases() {
        let meta: Metadata = serde_json::from_str(
            r#"{"streams":[{"id":"a","sample_rate_hz":30000,"events":[]}]}"#,
        )
        .unwrap();
        assert!(meta.events_by_source()["a"].is_empty());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"{"streams":[{"id":"a","sample_rate_hz":30000,"events":[{"sample_index":1,"direction":"on"}]}]}"#,
        )
        .unwrap();
        match read_metadata(&path).unwrap_err() {
            Error::Schema(msg) => assert!(msg.contains("label"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_event_is_kept_with_warning() {
        let events = vec![
            LabeledEvent {
                sample_index: 10,
                direction: Direction::On,
                label: "Toaster".into(),
            },
            LabeledEvent {
                sample_index: 500,
                direction: Direction::Off,
                label: "Toaster".into(),
            },
        ];
        let warnings = validate_events("a", &events, 100);
        assert_eq!(warnings.len(), 1);
        assert!(matches!(
            warnings[0],
            EventWarning::IndexBeyondStream { sample_index: 500, .. }
        ));
        let meta = Metadata {
            streams: vec![StreamMetadata {
                id: "a".into(),
                sample_rate_hz: 30000,
                events,
            }],
        };
        assert_eq!(meta.unknown_labels().len(), 2);
        assert_eq!(meta.events_by_source()["a"].len(), 2);
    }

    #[test]
    fn single_resistive_turn_on() {
        let mut spec = ScenarioSpec::new(2.0, 1);
        spec.archetypes = vec![resistive()];
        spec.schedule = vec![(1.0, "bulb".into(), Direction::On)];
        let (stream, events) = synthesize(&spec).unwrap();
        assert_eq!(stream.len(), 60_000);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].sample_index, 30_000);
        assert!(stream.current[..30_000].iter().all(|&x| x == 0.0));
        for k in 30_000..60_000 {
            let theta = spec.phase_at(k as f64 / 30_000.0);
            assert_eq!(stream.current[k], theta.cos());
            assert!((stream.voltage[k] - 170.0 * theta.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synthesize(&noisy_spec()).unwrap();
        let b = synthesize(&noisy_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = noisy_spec();
        other.seed = 8;
        assert_ne!(synthesize(&other).unwrap().0.current, a.0.current);
    }

    #[test]
    fn superposition_of_solo_runs() {
        let mut spec = noisy_spec();
        spec.noise_snr_db = None;
        let (agg, _) = synthesize(&spec).unwrap();
        let solo = |id: &str| {
            let mut s = spec.clone();
            s.schedule.retain(|e| e.1 == id);
            synthesize(&s).unwrap().0
        };
        let bulb = solo("bulb");
        let fan = solo("fan");
        for k in 0..agg.len() {
            assert_eq!(agg.current[k], bulb.current[k] + fan.current[k]);
        }
    }

    #[test]
    fn overlapping_on_intervals_rejected() {
        let mut spec = ScenarioSpec::new(1.0, 1);
        spec.archetypes = vec![resistive()];
        spec.schedule = vec![
            (0.1, "bulb".into(), Direction::On),
            (0.2, "bulb".into(), Direction::On),
        ];
        assert!(matches!(synthesize(&spec), Err(Error::Scenario(_))));
        spec.schedule = vec![(0.1, "bulb".into(), Direction::Off)];
        assert!(matches!(synthesize(&spec), Err(Error::Scenario(_))));
        spec.schedule = vec![(0.1, "lamp".into(), Direction::On)];
        assert!(matches!(synthesize(&spec), Err(Error::Scenario(_))));
    }

    #[test]
    fn transient_gain_decays_linearly() {
        let mut spec = ScenarioSpec::new(0.5, 1);
        spec.archetypes =
            vec![ApplianceArchetype::steady("m", vec![(1, 1.0, 0.0)]).with_transient(4, 3.0)];
        spec.schedule = vec![(0.0, "m".into(), Direction::On)];
        let (stream, _) = synthesize(&spec).unwrap();
        // theta(0) = 0, so sample 0 carries the full gain
        assert!((stream.current[0] - 3.0).abs() < 1e-12);
        // two cycles in (1000 samples at 60 Hz / 30 kHz) the gain is halfway
        assert!((stream.current[1000] - 2.0).abs() < 1e-9);
        assert!((stream.current[5000] - spec.phase_at(5000.0 / 30_000.0).cos()).abs() < 1e-12);
    }

    #[test]
    fn scenario_json_round_trip() {
        let spec = noisy_spec();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"schedule\":[[0.1,\"bulb\",\"on\"]"));
        let back: ScenarioSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn write_then_read_reproduces_samples() {
        let (stream, _) = synthesize(&noisy_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agg.csv");
        write_stream_csv(&stream, &path, ColumnOrder::CurrentFirst).unwrap();
        let back = read_plaid_stream(&path, ColumnOrder::CurrentFirst).unwrap();
        assert_eq!(back.len(), stream.len());
        for k in 0..stream.len() {
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
            assert!(rel(back.current[k], stream.current[k]) <= 1e-9 || back.current[k] == stream.current[k]);
            assert!(rel(back.voltage[k], stream.voltage[k]) <= 1e-9 || back.voltage[k] == stream.voltage[k]);
        }
    }
}
