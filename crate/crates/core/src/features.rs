//! Fourier features of a single-cycle signature.
//!
//! Because a resampled cycle spans exactly one fundamental period, harmonic
//! `n` lands in DFT bin `n` with no windowing or leakage, and because sample 0
//! sits on the voltage rising crossing every phase is measured against the
//! voltage. Phases are reported through their cosine, which keeps them in
//! `[-1, 1]` and free of wrap-around.
//!
//! The feature vector is
//! `[a1, cos phi1, cos phi2, cos phi3, cos phi4, cos phi5, cos phi7, cos phi9]`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signature::Signature;

pub const FEATURE_COUNT: usize = 8;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "a1", "cos_phi1", "cos_phi2", "cos_phi3", "cos_phi4", "cos_phi5", "cos_phi7", "cos_phi9",
];

/// Harmonic orders whose phase cosines are features, in feature order.
pub const PHASE_HARMONICS: [usize; 7] = [1, 2, 3, 4, 5, 7, 9];

/// Below this amplitude (amperes) a harmonic's phase is undefined and its
/// cosine is reported as 0.
pub const DEGENERATE_AMPLITUDE: f64 = 1e-9;

/// The eight classifier inputs, in the order of [`FEATURE_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    /// Fundamental peak amplitude, amperes.
    pub fn a1(&self) -> f64 {
        self.0[0]
    }

    /// Cosine of the phase of harmonic `order`, if it is one of the features.
    pub fn cos_phi(&self, order: usize) -> Option<f64> {
        PHASE_HARMONICS
            .iter()
            .position(|&n| n == order)
            .map(|p| self.0[p + 1])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// True for the all-zero signature, whose phases are all undefined.
    pub fn is_degenerate(&self) -> bool {
        self.a1() < DEGENERATE_AMPLITUDE && self.0[1..].iter().all(|&c| c == 0.0)
    }
}

/// Amplitude and phase of one harmonic, such that the signal is
/// `sum_n amplitude_n * cos(2 pi n t / T + phase_n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub order: usize,
    pub amplitude: f64,
    pub phase: f64,
}

/// Planned forward FFT for one cycle length.
#[derive(Clone)]
pub struct HarmonicAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    len: usize,
}

impl std::fmt::Debug for HarmonicAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HarmonicAnalyzer").field("len", &self.len).finish()
    }
}

impl HarmonicAnalyzer {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        HarmonicAnalyzer { fft, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Harmonics `0..=max_order` of one cycle. Entry `n` is order `n`; the DC
    /// term is reported with amplitude `|X0| / T`.
    pub fn harmonics(&self, signal: &[f64], max_order: usize) -> Result<Vec<Harmonic>> {
        let t = signal.len();
        if t != self.len {
            return Err(Error::Domain(format!(
                "analyzer planned for {} samples, got {t}",
                self.len
            )));
        }
        if t < 2 * max_order + 2 {
            return Err(Error::Domain(format!(
                "{t} samples per cycle cannot resolve harmonic {max_order} (need at least {})",
                2 * max_order + 2
            )));
        }
        let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        let scale = 2.0 / t as f64;
        Ok(buf
            .iter()
            .take(max_order + 1)
            .enumerate()
            .map(|(n, x)| Harmonic {
                order: n,
                amplitude: if n == 0 { x.norm() / t as f64 } else { scale * x.norm() },
                phase: x.arg(),
            })
            .collect())
    }

    pub fn features(&self, signal: &[f64]) -> Result<FeatureVector> {
        let h = self.harmonics(signal, 9)?;
        let mut out = [0.0; FEATURE_COUNT];
        out[0] = h[1].amplitude;
        for (slot, &n) in out[1..].iter_mut().zip(&PHASE_HARMONICS) {
            *slot = if h[n].amplitude < DEGENERATE_AMPLITUDE {
                0.0
            } else {
                h[n].phase.cos()
            };
        }
        Ok(FeatureVector(out))
    }
}

/// Harmonics `0..=max_order` of a signature.
pub fn harmonics(signature: &Signature, max_order: usize) -> Result<Vec<Harmonic>> {
    HarmonicAnalyzer::new(signature.current.len()).harmonics(&signature.current, max_order)
}

/// The eight-feature vector of a signature.
pub fn extract_features(signature: &Signature) -> Result<FeatureVector> {
    HarmonicAnalyzer::new(signature.current.len()).features(&signature.current)
}

// ---------------------------------------------------------------------------
// Correlation report
// ---------------------------------------------------------------------------

/// Pearson correlations between the eight features over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub matrix: [[f64; FEATURE_COUNT]; FEATURE_COUNT],
}

/// Pearson correlation matrix of equally long columns. A constant column
/// correlates 0 with every other column and 1 with itself.
pub fn correlation_matrix(columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = columns.first().map_or(0, Vec::len);
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 3 rows, got {n}"
        )));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Domain("columns differ in length".into()));
    }
    let centered: Vec<(Vec<f64>, f64)> = columns
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n as f64;
            let d: Vec<f64> = c.iter().map(|x| x - mean).collect();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            (d, norm)
        })
        .collect();
    let k = columns.len();
    let mut m = vec![vec![0.0; k]; k];
    for a in 0..k {
        m[a][a] = 1.0;
        for b in (a + 1)..k {
            let (da, na) = &centered[a];
            let (db, nb) = &centered[b];
            let r = if *na == 0.0 || *nb == 0.0 {
                0.0
            } else {
                let dot: f64 = da.iter().zip(db).map(|(x, y)| x * y).sum();
                (dot / (na * nb)).clamp(-1.0, 1.0)
            };
            m[a][b] = r;
            m[b][a] = r;
        }
    }
    Ok(m)
}

pub fn correlation_report(features: &[FeatureVector]) -> Result<CorrelationReport> {
    let columns: Vec<Vec<f64>> = (0..FEATURE_COUNT)
        .map(|j| features.iter().map(|f| f.0[j]).collect())
        .collect();
    let m = correlation_matrix(&columns)?;
    let mut matrix = [[0.0; FEATURE_COUNT]; FEATURE_COUNT];
    for (row, src) in matrix.iter_mut().zip(&m) {
        row.copy_from_slice(src);
    }
    Ok(CorrelationReport { matrix })
}

impl CorrelationReport {
    /// 8x8 CSV with feature names as header row and first column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature");
        for name in FEATURE_NAMES {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in FEATURE_NAMES.iter().zip(&self.matrix) {
            out.push_str(name);
            for r in row {
                out.push_str(&format!(",{r}"));
            }
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Feature CSV
// ---------------------------------------------------------------------------

pub fn feature_csv_header() -> String {
    let mut h = FEATURE_NAMES.join(",");
    h.push_str(",label");
    h
}

/// Writes labeled feature rows with the header
/// `a1,cos_phi1,...,cos_phi9,label`.
pub fn write_feature_csv(path: impl AsRef<Path>, rows: &[(FeatureVector, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "{}", feature_csv_header()).expect("write to Vec");
    for (f, label) in rows {
        for x in f.0 {
            write!(out, "{x},").expect("write to Vec");
        }
        writeln!(out, "{label}").expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<(FeatureVector, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == feature_csv_header() => {}
        _ => {
            return Err(Error::Schema(format!(
                "{}: expected header `{}`",
                path.display(),
                feature_csv_header()
            )))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.splitn(FEATURE_COUNT + 1, ',').collect();
        if fields.len() != FEATURE_COUNT + 1 {
            return Err(parse_err(format!("expected {} fields", FEATURE_COUNT + 1)));
        }
        let mut f = [0.0; FEATURE_COUNT];
        for (slot, s) in f.iter_mut().zip(&fields) {
            *slot = s
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("non-numeric value `{s}`")))?;
        }
        rows.push((FeatureVector(f), fields[FEATURE_COUNT].to_string()));
    }
    Ok(rows)
}
