//! Frequency-invariant resampling of mains cycles.
//!
//! Each period of the voltage, delimited by two consecutive rising
//! zero-crossings, is resampled onto `T` uniformly spaced phase points. After
//! this step every cycle has the same length whatever the instantaneous grid
//! frequency, sample index `t` corresponds to the same voltage phase in every
//! cycle, and sample 0 sits on the voltage rising edge.
//!
//! Crossings are refined and samples are interpolated linearly, which keeps the
//! per-cycle cost at O(T).

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::ingest::RawStream;

/// Samples per resampled cycle for 30 kHz data.
pub const DEFAULT_CYCLE_SAMPLES: usize = 500;
/// Smallest cycle length accepted.
pub const MIN_CYCLE_SAMPLES: usize = 16;
/// Relative duration mismatch above which a cycle is flagged off-nominal.
pub const OFF_NOMINAL_TOLERANCE: f64 = 0.2;

/// One voltage period resampled to a fixed number of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    /// Resampled voltage, volts.
    pub v: Vec<f64>,
    /// Resampled current, amperes.
    pub i: Vec<f64>,
    /// Fractional raw-sample position of the opening rising crossing.
    pub start: f64,
    /// Raw samples spanned by the cycle (fractional).
    pub duration_samples: f64,
    /// Set when the raw duration differs from the nominal period by more
    /// than [`OFF_NOMINAL_TOLERANCE`].
    pub off_nominal: bool,
}

impl Cycle {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Index of the raw sample on which the cycle starts.
    pub fn start_sample(&self) -> usize {
        self.start.floor().max(0.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitpsConfig {
    pub cycle_samples: usize,
    /// Nominal grid frequency, used only to flag off-nominal cycles.
    pub nominal_hz: f64,
}

impl Default for FitpsConfig {
    fn default() -> Self {
        FitpsConfig {
            cycle_samples: DEFAULT_CYCLE_SAMPLES,
            nominal_hz: 60.0,
        }
    }
}

impl FitpsConfig {
    pub fn new(cycle_samples: usize, nominal_hz: f64) -> Result<Self> {
        let config = FitpsConfig {
            cycle_samples,
            nominal_hz,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle_samples < MIN_CYCLE_SAMPLES {
            return Err(Error::Domain(format!(
                "cycle length must be at least {MIN_CYCLE_SAMPLES} samples, got {}",
                self.cycle_samples
            )));
        }
        if !(self.nominal_hz > 0.0 && self.nominal_hz.is_finite()) {
            return Err(Error::Domain(format!(
                "nominal frequency must be positive, got {}",
                self.nominal_hz
            )));
        }
        Ok(())
    }
}

/// Rising crossing between samples `j` and `j + 1`, if any, as a fractional
/// sample position.
///
/// A crossing is a negative sample followed by a non-negative one. A stream
/// that starts exactly on zero and then rises also crosses at position 0.
fn rising_crossing(j: usize, prev: f64, next: f64) -> Option<f64> {
    if prev < 0.0 && next >= 0.0 {
        Some(j as f64 + (-prev) / (next - prev))
    } else if j == 0 && prev == 0.0 && next > 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// Positions of the rising zero-crossings of `voltage`, refined by linear
/// interpolation. Requires at least two crossings.
pub fn find_zero_crossings(voltage: &[f64]) -> Result<Vec<f64>> {
    let crossings: Vec<f64> = voltage
        .windows(2)
        .enumerate()
        .filter_map(|(j, w)| rising_crossing(j, w[0], w[1]))
        .collect();
    if crossings.len() < 2 {
        return Err(Error::InsufficientSignal {
            found: crossings.len(),
        });
    }
    Ok(crossings)
}

/// Incremental resampler: feed raw samples, receive cycles as soon as their
/// closing crossing has been seen. Only the samples since the last crossing
/// are retained.
#[derive(Debug, Clone)]
pub struct CycleResampler {
    config: FitpsConfig,
    nominal_period: f64,
    v: VecDeque<f64>,
    i: VecDeque<f64>,
    /// Global index of `v[0]`.
    offset: usize,
    /// Global index of the next sample to arrive.
    next_index: usize,
    last_crossing: Option<f64>,
    crossings_seen: usize,
}

impl CycleResampler {
    pub fn new(config: FitpsConfig, sample_rate_hz: f64) -> Result<Self> {
        config.validate()?;
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Domain(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(CycleResampler {
            config,
            nominal_period: sample_rate_hz / config.nominal_hz,
            v: VecDeque::new(),
            i: VecDeque::new(),
            offset: 0,
            next_index: 0,
            last_crossing: None,
            crossings_seen: 0,
        })
    }

    pub fn config(&self) -> &FitpsConfig {
        &self.config
    }

    pub fn crossings_seen(&self) -> usize {
        self.crossings_seen
    }

    /// Raw samples currently held.
    pub fn buffered_samples(&self) -> usize {
        self.v.len()
    }

    /// Feeds one raw sample; returns the cycle it completes, if any.
    pub fn push(&mut self, voltage: f64, current: f64) -> Option<Cycle> {
        let n = self.next_index;
        self.next_index += 1;
        self.v.push_back(voltage);
        self.i.push_back(current);
        if n == 0 {
            return None;
        }
        let prev = self.v[n - 1 - self.offset];
        let Some(crossing) = rising_crossing(n - 1, prev, voltage) else {
            // with no crossing yet only the newest sample matters
            if self.last_crossing.is_none() {
                self.discard_before(n);
            }
            return None;
        };
        self.crossings_seen += 1;
        let cycle = self
            .last_crossing
            .map(|start| self.resample(start, crossing));
        self.last_crossing = Some(crossing);
        self.discard_before(crossing.floor() as usize);
        cycle
    }

    /// Feeds a block of samples, appending completed cycles to `out`.
    pub fn push_slice(&mut self, voltage: &[f64], current: &[f64], out: &mut Vec<Cycle>) {
        for (&v, &i) in voltage.iter().zip(current) {
            if let Some(c) = self.push(v, i) {
                out.push(c);
            }
        }
    }

    fn discard_before(&mut self, index: usize) {
        while self.offset < index && !self.v.is_empty() {
            self.v.pop_front();
            self.i.pop_front();
            self.offset += 1;
        }
    }

    fn resample(&self, start: f64, end: f64) -> Cycle {
        let t = self.config.cycle_samples;
        let span = end - start;
        let step = span / t as f64;
        let mut v = Vec::with_capacity(t);
        let mut i = Vec::with_capacity(t);
        let last = self.offset + self.v.len() - 1;
        for m in 0..t {
            let x = start + m as f64 * step;
            let j = (x.floor() as usize).min(last);
            let frac = x - j as f64;
            let a = j - self.offset;
            let b = (j + 1).min(last) - self.offset;
            v.push(self.v[a] + frac * (self.v[b] - self.v[a]));
            i.push(self.i[a] + frac * (self.i[b] - self.i[a]));
        }
        let mismatch = (span / self.nominal_period - 1.0).abs();
        Cycle {
            v,
            i,
            start,
            duration_samples: span,
            off_nominal: mismatch > OFF_NOMINAL_TOLERANCE,
        }
    }
}

/// Resamples every complete voltage period of `stream`, in stream order.
pub fn fitps(stream: &RawStream, config: &FitpsConfig) -> Result<Vec<Cycle>> {
    let mut resampler = CycleResampler::new(*config, stream.sample_rate_hz)?;
    let mut cycles = Vec::new();
    resampler.push_slice(&stream.voltage, &stream.current, &mut cycles);
    if resampler.crossings_seen() < 2 {
        return Err(Error::InsufficientSignal {
            found: resampler.crossings_seen(),
        });
    }
    Ok(cycles)
}
