//! Per-cycle active power and the sliding-window z-score event detector.
//!
//! A new cycle's power is compared against the mean and population standard
//! deviation of the previous `w` powers. When the z-score exceeds `Z` an event
//! fires and the window is cleared: the next `w` cycles only rebuild the
//! statistics (the blind zone).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::fitps::Cycle;
use crate::ingest::Direction;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_Z_THRESHOLD: f64 = 30.0;
pub const DEFAULT_SIGMA_FLOOR: f64 = 0.01;

/// Mean of `v * i` over one resampled cycle, in watts.
pub fn active_power(cycle: &Cycle) -> f64 {
    power_of(&cycle.v, &cycle.i)
}

pub(crate) fn power_of(v: &[f64], i: &[f64]) -> f64 {
    v.iter().zip(i).map(|(a, b)| a * b).sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub window: usize,
    pub z_threshold: f64,
    /// Lower bound applied to the window standard deviation, watts.
    pub sigma_floor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: DEFAULT_WINDOW,
            z_threshold: DEFAULT_Z_THRESHOLD,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }
}

/// A statistically significant change of active power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub cycle_index: usize,
    pub direction: Direction,
    pub z_score: f64,
    /// Window mean before the event, watts.
    pub p_before: f64,
    /// Power of the triggering cycle, watts.
    pub p_after: f64,
    pub delta_p: f64,
}

#[derive(Debug, Clone)]
pub struct DetectorState {
    config: DetectorConfig,
    window: VecDeque<f64>,
    blind_remaining: usize,
}

impl DetectorState {
    pub fn new(config: DetectorConfig) -> Self {
        assert!(config.window >= 1, "window must hold at least one cycle");
        DetectorState {
            config,
            window: VecDeque::with_capacity(config.window),
            blind_remaining: 0,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn window(&self) -> &VecDeque<f64> {
        &self.window
    }

    pub fn blind_remaining(&self) -> usize {
        self.blind_remaining
    }

    /// Mean and population standard deviation of the current window.
    pub fn window_stats(&self) -> (f64, f64) {
        let n = self.window.len() as f64;
        let mean = self.window.iter().sum::<f64>() / n;
        let var = self.window.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    fn push(&mut self, p: f64) {
        if self.window.len() == self.config.window {
            self.window.pop_front();
        }
        self.window.push_back(p);
    }

    /// Feeds the power of cycle `k`; returns an event when one fires.
    pub fn step(&mut self, k: usize, p: f64) -> Option<Event> {
        if self.blind_remaining > 0 {
            self.blind_remaining -= 1;
            self.push(p);
            return None;
        }
        if self.window.len() < self.config.window {
            self.push(p);
            return None;
        }
        let (mean, sigma) = self.window_stats();
        let z = (p - mean).abs() / sigma.max(self.config.sigma_floor);
        if z > self.config.z_threshold {
            let delta_p = p - mean;
            self.window.clear();
            self.blind_remaining = self.config.window;
            return Some(Event {
                cycle_index: k,
                direction: if delta_p > 0.0 {
                    Direction::On
                } else {
                    Direction::Off
                },
                z_score: z,
                p_before: mean,
                p_after: p,
                delta_p,
            });
        }
        self.push(p);
        None
    }
}

/// Runs a fresh detector over a whole power series.
pub fn detect(config: DetectorConfig, powers: &[f64]) -> Vec<Event> {
    let mut state = DetectorState::new(config);
    powers
        .iter()
        .enumerate()
        .filter_map(|(k, &p)| state.step(k, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cycle(v: Vec<f64>, i: Vec<f64>) -> Cycle {
        Cycle {
            v,
            i,
            start: 0.0,
            duration_samples: 500.0,
            off_nominal: false,
        }
    }

    #[test]
    fn in_phase_power_is_half_peak_product() {
        let v: Vec<f64> = (0..500).map(|k| 170.0 * (2.0 * PI * k as f64 / 500.0).cos()).collect();
        let i: Vec<f64> = (0..500).map(|k| (2.0 * PI * k as f64 / 500.0).cos()).collect();
        assert!((active_power(&cycle(v.clone(), i)) - 85.0).abs() < 1e-9);
        assert_eq!(active_power(&cycle(v.clone(), vec![0.0; 500])), 0.0);
        let q: Vec<f64> = (0..500).map(|k| (2.0 * PI * k as f64 / 500.0).sin()).collect();
        assert!(active_power(&cycle(v, q)).abs() < 1e-9);
    }

    #[test]
    fn hand_computed_window_fires() {
        let mut d = DetectorState::new(DetectorConfig::default());
        let window = [100.0, 102.0, 98.0, 101.0, 99.0, 100.0, 100.0, 101.0, 99.0, 100.0];
        for (k, &p) in window.iter().enumerate() {
            assert!(d.step(k, p).is_none());
        }
        let (mean, sigma) = d.window_stats();
        assert!((mean - 100.0).abs() < 1e-12);
        assert!((sigma - 1.2f64.sqrt()).abs() < 1e-12);
        let e = d.step(10, 150.0).expect("event");
        assert!((e.z_score - 50.0 / 1.2f64.sqrt()).abs() < 1e-9);
        assert!((e.z_score - 45.64).abs() < 0.01);
        assert_eq!(e.direction, Direction::On);
        assert!((e.delta_p - 50.0).abs() < 1e-12);
        assert_eq!(d.blind_remaining(), 10);
        assert!(d.window().is_empty());
    }

    #[test]
    fn constant_power_never_fires() {
        assert!(detect(DetectorConfig::default(), &[100.0; 10_000]).is_empty());
    }

    #[test]
    fn blind_zone_suppresses_and_rebuilds() {
        let mut powers = vec![100.0; 20];
        powers.extend(vec![500.0; 3]);
        powers.push(5000.0); // k = 23, inside the blind zone
        powers.extend(vec![500.0; 40]);
        let events = detect(DetectorConfig::default(), &powers);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].cycle_index, 20);

        // the window after the blind zone holds exactly the w blind-zone powers
        let mut d = DetectorState::new(DetectorConfig::default());
        for (k, &p) in powers.iter().take(31).enumerate() {
            d.step(k, p);
        }
        assert_eq!(d.blind_remaining(), 0);
        assert_eq!(d.window().iter().copied().collect::<Vec<_>>(), powers[21..31].to_vec());
    }

    #[test]
    fn off_event_has_negative_delta() {
        let mut powers = vec![300.0; 15];
        powers.extend(vec![100.0; 5]);
        let events = detect(DetectorConfig::default(), &powers);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].direction, Direction::Off);
        assert!(events[0].delta_p < 0.0);
    }

    #[test]
    fn warm_up_waits_for_full_window() {
        let powers = [0.0, 1000.0, 0.0, 1000.0];
        assert!(detect(DetectorConfig::default(), &powers).is_empty());
    }

    proptest! {
        #[test]
        fn z_matches_brute_force(
            powers in prop::collection::vec(90.0f64..110.0, 11..60),
            jump in 0.0f64..200.0,
        ) {
            let config = DetectorConfig::default();
            let mut d = DetectorState::new(config);
            let mut all = powers.clone();
            all.push(100.0 + jump);
            for (k, &p) in all.iter().enumerate() {
                let before: Vec<f64> = d.window().iter().copied().collect();
                let blind = d.blind_remaining();
                let ev = d.step(k, p);
                if blind == 0 && before.len() == config.window {
                    let n = before.len() as f64;
                    let mean = before.iter().sum::<f64>() / n;
                    let sd = (before.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
                    let z = (p - mean).abs() / sd.max(config.sigma_floor);
                    prop_assert_eq!(ev.is_some(), z > config.z_threshold);
                    if let Some(e) = ev {
                        prop_assert!((e.z_score - z).abs() <= 1e-12 * z.max(1.0));
                    }
                }
            }
        }

        #[test]
        fn events_are_spaced_by_more_than_window(
            powers in prop::collection::vec(
                prop_oneof![90.0f64..110.0, 1000.0f64..1010.0], 0..400)
        ) {
            let events = detect(DetectorConfig::default(), &powers);
            for pair in events.windows(2) {
                prop_assert!(pair[1].cycle_index - pair[0].cycle_index >= DEFAULT_WINDOW + 1);
            }
        }

        #[test]
        fn decisions_are_scale_invariant(
            powers in prop::collection::vec(
                prop_oneof![4 => 50.0f64..150.0, 1 => 5000.0f64..5100.0], 0..200),
            scale in 0.01f64..100.0,
        ) {
            let config = DetectorConfig::default();
            let scaled: Vec<f64> = powers.iter().map(|p| p * scale).collect();
            let scaled_config = DetectorConfig { sigma_floor: config.sigma_floor * scale, ..config };
            let a: Vec<usize> = detect(config, &powers).iter().map(|e| e.cycle_index).collect();
            let b: Vec<usize> = detect(scaled_config, &scaled).iter().map(|e| e.cycle_index).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn noise_free_step_is_caught_on_the_step_cycle(
            base in 0.0f64..1000.0,
            step in 1.0f64..1000.0,
            lead in 10usize..40,
            up in any::<bool>(),
        ) {
            let mut powers = vec![base; lead];
            let after = if up { base + step } else { base - step };
            powers.extend(vec![after; 20]);
            let events = detect(DetectorConfig::default(), &powers);
            prop_assert_eq!(events.len(), 1);
            prop_assert_eq!(events[0].cycle_index, lead);
        }
    }
}
