//! Synthetic appliance corpora and the on-disk dataset layout.
//!
//! A dataset directory holds individually metered recordings for training
//! and annotated aggregate recordings for testing:
//!
//! ```text
//! <root>/metadata.json            annotations of the aggregated streams
//! <root>/aggregated/<id>.csv      one file per entry of metadata.json
//! <root>/submetered/<label>/*.csv single-appliance recordings
//! ```
//!
//! Waveform files are two-column `current,voltage` CSVs. A PLAID export
//! arranged this way loads with the same code.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::ingest::{
    read_metadata, read_stream, synthesize, write_metadata, write_stream_csv, ApplianceArchetype,
    ColumnOrder, Direction, Metadata, RawStream, ScenarioSpec, ScheduledSwitch, StreamMetadata,
};

pub const METADATA_FILE: &str = "metadata.json";
pub const AGGREGATED_DIR: &str = "aggregated";
pub const SUBMETERED_DIR: &str = "submetered";
/// Length of each synthetic single-appliance recording, seconds.
pub const SUBMETERED_SECONDS: f64 = 2.0;

/// Eight appliance types with distinct harmonic fingerprints. With voltage
/// `Vpk sin(theta)`, a fundamental phase of `-pi/2` is in phase with the
/// voltage; more negative values lag.
pub fn standard_archetypes() -> Vec<ApplianceArchetype> {
    let lag = |d: f64| -FRAC_PI_2 - d;
    vec![
        ApplianceArchetype::steady("heater", vec![(1, 10.0, lag(0.0))]),
        ApplianceArchetype::steady("bulb", vec![(1, 1.2, lag(0.0)), (3, 0.04, 0.3)]),
        ApplianceArchetype::steady("fan", vec![(1, 1.5, lag(0.6)), (3, 0.12, 0.3)]),
        ApplianceArchetype::steady("fridge", vec![(1, 2.5, lag(0.8)), (3, 0.3, 1.0), (5, 0.1, -0.4)])
            .with_transient(5, 2.5),
        ApplianceArchetype::steady(
            "laptop",
            vec![(1, 1.2, lag(-0.3)), (3, 0.6, 2.0), (5, 0.4, -1.0), (7, 0.25, 1.5), (9, 0.15, -2.5)],
        ),
        ApplianceArchetype::steady(
            "microwave",
            vec![(1, 6.0, lag(0.3)), (2, 0.3, 0.7), (3, 1.2, -0.5), (5, 0.5, 2.2)],
        )
        .with_transient(3, 1.5),
        ApplianceArchetype::steady(
            "cfl",
            vec![(1, 1.0, lag(-0.6)), (3, 0.45, -2.2), (5, 0.35, 0.9), (7, 0.2, -1.3)],
        ),
        ApplianceArchetype::steady("hairdryer", vec![(1, 7.0, lag(0.05)), (2, 0.8, 1.2), (4, 0.2, -0.6)])
            .with_transient(2, 1.3),
    ]
}

/// A random on/off schedule: each switch toggles a uniformly chosen
/// appliance, with gaps drawn from `[min_gap_s, max_gap_s)`. Returns the
/// schedule and the time of its last switch.
pub fn random_schedule(
    archetypes: &[ApplianceArchetype],
    n_events: usize,
    start_s: f64,
    min_gap_s: f64,
    max_gap_s: f64,
    seed: u64,
) -> (Vec<ScheduledSwitch>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut on = vec![false; archetypes.len()];
    let mut t = start_s;
    let mut schedule = Vec::with_capacity(n_events);
    for i in 0..n_events {
        if i > 0 {
            t += rng.random_range(min_gap_s..max_gap_s);
        }
        let a = rng.random_range(0..archetypes.len());
        let dir = if on[a] { Direction::Off } else { Direction::On };
        on[a] = !on[a];
        schedule.push((t, archetypes[a].archetype_id.clone(), dir));
    }
    (schedule, t)
}

/// An aggregate scenario over [`standard_archetypes`] with `n_events`
/// switches spaced 0.6 to 1.0 s apart.
pub fn standard_scenario(n_events: usize, noise_snr_db: Option<f64>, drift_hz: f64, seed: u64) -> ScenarioSpec {
    let archetypes = standard_archetypes();
    let (schedule, last) = random_schedule(&archetypes, n_events, 0.5, 0.6, 1.0, seed);
    let mut spec = ScenarioSpec::new(last + 1.0, seed);
    spec.archetypes = archetypes;
    spec.schedule = schedule;
    spec.noise_snr_db = noise_snr_db;
    spec.frequency_drift_hz = drift_hz;
    spec
}

fn clean_rms(spec: &ScenarioSpec) -> Result<f64> {
    let clean = ScenarioSpec {
        noise_snr_db: None,
        ..spec.clone()
    };
    let (stream, _) = synthesize(&clean)?;
    Ok((stream.current.iter().map(|x| x * x).sum::<f64>() / stream.len().max(1) as f64).sqrt())
}

/// One single-appliance recording per archetype of `spec`, sharing its
/// grid and drift settings.
///
/// The meter is shared too: each recording carries the same absolute noise
/// level as the aggregate stream of `spec`, so a small appliance is not
/// measured more cleanly alone than it is in the mix.
pub fn submetered_recordings(spec: &ScenarioSpec, duration_s: f64) -> Result<Vec<(String, RawStream)>> {
    let aggregate_rms = match spec.noise_snr_db {
        Some(_) => clean_rms(spec)?,
        None => 0.0,
    };
    spec.archetypes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut sub = spec.submetered(a, duration_s, spec.seed.wrapping_add(1 + i as u64));
            if let Some(snr) = spec.noise_snr_db {
                let own = clean_rms(&sub)?;
                if own > 0.0 && aggregate_rms > 0.0 {
                    sub.noise_snr_db = Some(snr + 20.0 * (own / aggregate_rms).log10());
                }
            }
            let (mut stream, _) = synthesize(&sub)?;
            stream.source_id = a.archetype_id.clone();
            Ok((a.archetype_id.clone(), stream))
        })
        .collect()
}

/// Files and annotations of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// `(label, path)` of every single-appliance recording, sorted.
    pub submetered: Vec<(String, PathBuf)>,
    /// Annotated aggregate recordings with their files.
    pub aggregated: Vec<(StreamMetadata, PathBuf)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

impl DatasetIndex {
    /// Indexes `root`. Either half of the layout may be absent.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let mut submetered = Vec::new();
        let sub_dir = root.join(SUBMETERED_DIR);
        if sub_dir.is_dir() {
            for label_dir in sorted_entries(&sub_dir)? {
                if !label_dir.is_dir() {
                    continue;
                }
                let label = label_dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                for file in sorted_entries(&label_dir)? {
                    if file.extension().is_some_and(|e| e == "csv") {
                        submetered.push((label.clone(), file));
                    }
                }
            }
        }
        let mut aggregated = Vec::new();
        let meta_path = root.join(METADATA_FILE);
        if meta_path.is_file() {
            let meta = read_metadata(&meta_path)?;
            for s in meta.streams {
                let path = root.join(AGGREGATED_DIR).join(format!("{}.csv", s.id));
                if !path.is_file() {
                    return Err(Error::Schema(format!(
                        "stream `{}` has no file at {}",
                        s.id,
                        path.display()
                    )));
                }
                aggregated.push((s, path));
            }
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            submetered,
            aggregated,
        })
    }

    pub fn read_submetered(&self, order: ColumnOrder, sample_rate_hz: f64) -> Result<Vec<(String, RawStream)>> {
        self.submetered
            .iter()
            .map(|(label, path)| Ok((label.clone(), read_stream(path, order, sample_rate_hz)?)))
            .collect()
    }
}

/// Summary of a written dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub aggregated_samples: usize,
    pub events: usize,
    pub submetered: usize,
}

/// Renders `spec` into a dataset directory: the aggregate stream with its
/// annotations plus one submetered recording per archetype.
pub fn write_dataset(spec: &ScenarioSpec, root: impl AsRef<Path>, submetered_s: f64) -> Result<DatasetSummary> {
    let root = root.as_ref();
    let (stream, events) = synthesize(spec)?;
    let agg_dir = root.join(AGGREGATED_DIR);
    fs::create_dir_all(&agg_dir).map_err(|e| Error::io(&agg_dir, e))?;
    write_stream_csv(&stream, agg_dir.join("synthetic.csv"), ColumnOrder::CurrentFirst)?;
    let meta = Metadata {
        streams: vec![StreamMetadata {
            id: "synthetic".into(),
            sample_rate_hz: spec.sample_rate_hz.round() as u32,
            events: events.clone(),
        }],
    };
    write_metadata(&meta, root.join(METADATA_FILE))?;
    let recordings = submetered_recordings(spec, submetered_s)?;
    for (label, rec) in &recordings {
        let dir = root.join(SUBMETERED_DIR).join(label);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_stream_csv(rec, dir.join("0.csv"), ColumnOrder::CurrentFirst)?;
    }
    Ok(DatasetSummary {
        aggregated_samples: stream.len(),
        events: events.len(),
        submetered: recordings.len(),
    })
}
