//! Appliance signature estimation from the cycles around an event.
//!
//! The cycle just before the event is subtracted from each of the `N_a`
//! cycles after it, which cancels every load that did not switch. The
//! elementwise median of those activation currents is the appliance's
//! single-cycle signature; with a majority of steady cycles it ignores both
//! noise and start-up transients.

use crate::error::{Error, Result};
use crate::ingest::Direction;

/// Cycles taken before an event.
pub const CYCLES_BEFORE: usize = 1;
/// Cycles taken after an event.
pub const DEFAULT_CYCLES_AFTER: usize = 18;

/// Current cycles around one event.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationWindow {
    /// The cycle preceding the event.
    pub before: Vec<f64>,
    /// The cycles from the event cycle onward.
    pub after: Vec<Vec<f64>>,
}

impl ActivationWindow {
    pub fn new(before: Vec<f64>, after: Vec<Vec<f64>>) -> Result<Self> {
        if after.is_empty() {
            return Err(Error::Domain(
                "activation window needs at least one cycle after the event".into(),
            ));
        }
        if let Some(bad) = after.iter().find(|c| c.len() != before.len()) {
            return Err(Error::Domain(format!(
                "cycle length mismatch in activation window: {} vs {}",
                bad.len(),
                before.len()
            )));
        }
        Ok(ActivationWindow { before, after })
    }

    pub fn cycles_after(&self) -> usize {
        self.after.len()
    }

    pub fn cycle_len(&self) -> usize {
        self.before.len()
    }
}

/// Estimated single-cycle current of the switched appliance.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    pub current: Vec<f64>,
    /// Post-event cycles that went into the median.
    pub n_a_used: usize,
    /// True when fewer cycles than requested were available.
    pub partial: bool,
}

impl Signature {
    /// Wraps a raw current cycle, e.g. a submetered recording's cycle.
    pub fn from_cycle(current: Vec<f64>) -> Self {
        Signature {
            current,
            n_a_used: 1,
            partial: false,
        }
    }
}

/// `after[k] - before`, elementwise, for every post-event cycle.
pub fn activation_currents(win: &ActivationWindow) -> Vec<Vec<f64>> {
    win.after
        .iter()
        .map(|a| a.iter().zip(&win.before).map(|(x, b)| x - b).collect())
        .collect()
}

/// Median over the rows at every sample index. An even row count yields the
/// mean of the two middle values.
pub fn elementwise_median(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let n = rows.len();
    let mut column = vec![0.0; n];
    (0..first.len())
        .map(|t| {
            for (slot, row) in column.iter_mut().zip(rows) {
                *slot = row[t];
            }
            column.sort_unstable_by(f64::total_cmp);
            if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            }
        })
        .collect()
}

pub fn estimate_signature(win: &ActivationWindow) -> Signature {
    Signature {
        current: elementwise_median(&activation_currents(win)),
        n_a_used: win.cycles_after(),
        partial: false,
    }
}

/// Signature for a detected event. Turn-off signatures are negated so that
/// both edges of one appliance produce the same waveform; a window shorter
/// than `requested` cycles is marked partial.
pub fn event_signature(win: &ActivationWindow, direction: Direction, requested: usize) -> Signature {
    let mut sig = estimate_signature(win);
    if direction == Direction::Off {
        for x in sig.current.iter_mut() {
            *x = -*x;
        }
    }
    sig.partial = win.cycles_after() < requested;
    sig
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn wave(t: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..t)
            .map(|k| amp * (2.0 * PI * k as f64 / t as f64 + phase).cos())
            .collect()
    }

    fn sort_median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    }

    #[test]
    fn unchanged_load_gives_zero_activation() {
        let b = wave(64, 1.0, 0.3);
        let win = ActivationWindow::new(b.clone(), vec![b.clone(); 18]).unwrap();
        assert!(activation_currents(&win).iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn turn_on_from_idle_recovers_cycle() {
        let s = wave(64, 2.0, -0.4);
        let win = ActivationWindow::new(vec![0.0; 64], vec![s.clone(); 18]).unwrap();
        for d in activation_currents(&win) {
            assert_eq!(d, s);
        }
        assert_eq!(estimate_signature(&win).current, s);
    }

    #[test]
    fn background_cancels() {
        // dyadic values keep the subtraction exact
        let b: Vec<f64> = (0..64).map(|k| (k % 7) as f64 * 0.25 - 0.75).collect();
        let s: Vec<f64> = (0..64).map(|k| (k % 5) as f64 * 0.5 - 1.0).collect();
        let sum: Vec<f64> = b.iter().zip(&s).map(|(x, y)| x + y).collect();
        let win = ActivationWindow::new(b, vec![sum; 18]).unwrap();
        for d in activation_currents(&win) {
            assert_eq!(d, s);
        }
    }

    #[test]
    fn median_ignores_outlier() {
        let rows = vec![vec![1.0], vec![100.0], vec![2.0]];
        assert_eq!(elementwise_median(&rows), vec![2.0]);
        let rows = vec![vec![1.0], vec![4.0], vec![2.0], vec![3.0]];
        assert_eq!(elementwise_median(&rows), vec![2.5]);
    }

    #[test]
    fn transient_minority_is_ignored() {
        let steady = wave(500, 1.5, -1.1);
        let mut after: Vec<Vec<f64>> = (0..4)
            .map(|_| steady.iter().map(|x| 3.0 * x).collect())
            .collect();
        after.extend(vec![steady.clone(); 14]);
        let win = ActivationWindow::new(vec![0.0; 500], after).unwrap();
        let sig = estimate_signature(&win);
        assert_eq!(sig.n_a_used, 18);
        for (a, b) in sig.current.iter().zip(&steady) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn off_events_are_negated_and_partial_flagged() {
        let s = wave(32, 1.0, 0.0);
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        // turn-off: before holds the appliance, after does not
        let win = ActivationWindow::new(s.clone(), vec![vec![0.0; 32]; 5]).unwrap();
        let sig = event_signature(&win, Direction::Off, 18);
        assert_eq!(sig.current, s);
        assert!(sig.partial);
        assert_eq!(sig.n_a_used, 5);
        let on = ActivationWindow::new(vec![0.0; 32], vec![s.clone(); 18]).unwrap();
        let sig = event_signature(&on, Direction::On, 18);
        assert!(!sig.partial);
        assert_ne!(sig.current, neg);
    }

    #[test]
    fn window_validation() {
        assert!(ActivationWindow::new(vec![0.0; 4], vec![]).is_err());
        assert!(ActivationWindow::new(vec![0.0; 4], vec![vec![0.0; 3]]).is_err());
    }

    fn window_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
        (1usize..20, 1usize..24).prop_flat_map(|(len, n)| {
            (
                prop::collection::vec(-5.0f64..5.0, len),
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, len), n),
            )
        })
    }

    proptest! {
        #[test]
        fn median_matches_sort_oracle((before, after) in window_strategy()) {
            let win = ActivationWindow::new(before, after).unwrap();
            let d = activation_currents(&win);
            let est = estimate_signature(&win).current;
            for t in 0..win.cycle_len() {
                let col: Vec<f64> = d.iter().map(|r| r[t]).collect();
                prop_assert_eq!(est[t], sort_median(col));
            }
        }

        #[test]
        fn permutation_invariant((before, after) in window_strategy(), seed in any::<u64>()) {
            let mut shuffled = after.clone();
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            let a = estimate_signature(&ActivationWindow::new(before.clone(), after).unwrap());
            let b = estimate_signature(&ActivationWindow::new(before, shuffled).unwrap());
            prop_assert_eq!(a.current, b.current);
        }

        #[test]
        fn background_invariant(
            (before, after) in window_strategy(),
            shift in prop::collection::vec(-3i32..3, 20),
        ) {
            // quarter-step grid keeps every sum and difference exact
            let q = |x: f64| (x * 4.0).round() / 4.0;
            let before: Vec<f64> = before.into_iter().map(q).collect();
            let after: Vec<Vec<f64>> = after.into_iter().map(|r| r.into_iter().map(q).collect()).collect();
            let c: Vec<f64> = (0..before.len()).map(|t| shift[t] as f64 * 0.5).collect();
            let add = |r: &Vec<f64>| r.iter().zip(&c).map(|(x, y)| x + y).collect::<Vec<f64>>();
            let a = estimate_signature(&ActivationWindow::new(before.clone(), after.clone()).unwrap());
            let b = estimate_signature(
                &ActivationWindow::new(add(&before), after.iter().map(add).collect()).unwrap(),
            );
            prop_assert_eq!(a.current, b.current);
        }

        #[test]
        fn minority_corruption_stays_in_clean_range(
            clean in prop::collection::vec(-5.0f64..5.0, 5..25),
            junk in prop::collection::vec(-1e6f64..1e6, 12),
        ) {
            let n_a = clean.len();
            let bad = (n_a - 1) / 2;
            let mut values = clean.clone();
            for (k, v) in values.iter_mut().enumerate().take(bad) {
                *v = junk[k % junk.len()];
            }
            let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
            let m = elementwise_median(&rows)[0];
            let uncorrupted = &clean[bad..];
            let lo = uncorrupted.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = uncorrupted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo && m <= hi, "{} not in [{}, {}]", m, lo, hi);
        }
    }
}
