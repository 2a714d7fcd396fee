//! Shift dynamics on coefficient data: the compact-open (Bebutov)
//! distance, epsilon-almost-period search, and the recurrence taxonomy.
//!
//! The distance between two time functions is the classical series
//!
//! ```text
//! d(phi1, phi2) = sum_{k>=1} 2^{-k} d_k / (1 + d_k),
//! d_k = sup_{|t| <= k} rho(phi1(t), phi2(t)),
//! ```
//!
//! truncated at `k_max` and sampled on a uniform grid.  Truncation alone
//! costs at most `2^{-k_max}`, which is reported alongside the value so
//! callers can budget for it.  The taxonomy enum records the declared
//! recurrence class of a coefficient system; classes form a chain, each
//! containing the previous: stationary, periodic, quasi-periodic, Bohr
//! almost periodic, Levitan almost periodic, then the weaker recurrence
//! notions down to Poisson stability.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Declared recurrence class of a coefficient system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum RecurrenceClass {
    Stationary,
    Periodic { period: f64 },
    QuasiPeriodic { frequencies: Vec<f64> },
    BohrAlmostPeriodic,
    LevitanAlmostPeriodic,
    PseudoPeriodic,
    PseudoRecurrent,
    PoissonStable,
}

impl std::fmt::Display for RecurrenceClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RecurrenceClass::Stationary => write!(f, "stationary"),
            RecurrenceClass::Periodic { period } => write!(f, "periodic (period {period})"),
            RecurrenceClass::QuasiPeriodic { frequencies } => {
                write!(f, "quasi-periodic (frequencies {frequencies:?})")
            }
            RecurrenceClass::BohrAlmostPeriodic => write!(f, "Bohr almost periodic"),
            RecurrenceClass::LevitanAlmostPeriodic => write!(f, "Levitan almost periodic"),
            RecurrenceClass::PseudoPeriodic => write!(f, "pseudo-periodic"),
            RecurrenceClass::PseudoRecurrent => write!(f, "pseudo-recurrent"),
            RecurrenceClass::PoissonStable => write!(f, "Poisson stable"),
        }
    }
}

/// Anything that can be compared pointwise in time with a shifted copy of
/// itself or with another object of the same kind.
pub trait TimeComparable: Sync {
    /// `rho(self(t + tau), other(t))` for the natural metric of the
    /// object (absolute value for signals, operator norm for operators,
    /// probe-point supremum for fields).
    fn pointwise_distance(&self, other: &Self, t: f64, tau: f64) -> f64;
}

/// Result of a truncated Bebutov distance computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BebutovDistance {
    /// Truncated series value; always in `[0, 1)`.
    pub value: f64,
    /// Upper bound on the mass discarded by truncating at `k_max`.
    pub truncation_bound: f64,
}

/// Truncated, grid-sampled Bebutov distance.  `k_max` is the truncation
/// depth of the series; `grid_step` is the sampling step used for the
/// window suprema.
pub fn bebutov_distance<T: TimeComparable>(
    phi1: &T,
    phi2: &T,
    k_max: u32,
    grid_step: f64,
) -> BebutovDistance {
    assert!(k_max >= 1, "at least one window is needed");
    assert!(grid_step > 0.0, "grid step must be positive");
    let n = (k_max as f64 / grid_step).ceil() as i64;
    // rho on the symmetric grid, indexed by |i| (the sup windows are
    // symmetric, so only the max of the pair at +/- t is needed).
    let shell: Vec<f64> = (0..=n)
        .map(|i| {
            let t = i as f64 * grid_step;
            let a = phi1.pointwise_distance(phi2, t, 0.0);
            let b = if i == 0 {
                a
            } else {
                phi1.pointwise_distance(phi2, -t, 0.0)
            };
            a.max(b)
        })
        .collect();
    let mut value = 0.0;
    let mut running: f64 = 0.0;
    let mut idx = 0usize;
    for k in 1..=k_max {
        let limit = ((k as f64) / grid_step).floor() as usize;
        while idx <= limit.min(n as usize) {
            running = running.max(shell[idx]);
            idx += 1;
        }
        value += 2.0_f64.powi(-(k as i32)) * running / (1.0 + running);
    }
    BebutovDistance {
        value,
        truncation_bound: 2.0_f64.powi(-(k_max as i32)),
    }
}

/// Parameters of an epsilon-almost-period grid search.
#[derive(Debug, Clone)]
pub struct AlmostPeriodSearch {
    /// Admissible sup distance over the comparison window.
    pub epsilon: f64,
    /// Shift range `[lo, hi]` searched.
    pub range: (f64, f64),
    /// Step of the shift grid.
    pub grid_step: f64,
    /// Half-width of the comparison window in `t`.
    pub window: f64,
    /// Step of the evaluation grid inside the window.
    pub eval_step: f64,
}

impl AlmostPeriodSearch {
    pub const DEFAULT_WINDOW: f64 = 100.0;
    pub const DEFAULT_EVAL_STEP: f64 = 0.05;

    pub fn new(epsilon: f64, range: (f64, f64), grid_step: f64) -> Self {
        AlmostPeriodSearch {
            epsilon,
            range,
            grid_step,
            window: Self::DEFAULT_WINDOW,
            eval_step: Self::DEFAULT_EVAL_STEP,
        }
    }

    pub fn with_window(mut self, window: f64, eval_step: f64) -> Self {
        self.window = window;
        self.eval_step = eval_step;
        self
    }
}

/// Sup of `rho(phi(t + tau), phi(t))` over the sampled window.
pub fn shift_defect<T: TimeComparable>(phi: &T, tau: f64, window: f64, eval_step: f64) -> f64 {
    let n = (window / eval_step).ceil() as i64;
    let mut sup: f64 = 0.0;
    for i in -n..=n {
        let t = i as f64 * eval_step;
        sup = sup.max(phi.pointwise_distance(phi, t, tau));
    }
    sup
}

/// Grid search for epsilon-almost periods: every shift `tau` in the grid
/// whose sampled shift defect stays below `epsilon`.  Returned in
/// ascending order; deterministic for fixed parameters.
pub fn find_almost_periods<T: TimeComparable>(phi: &T, search: &AlmostPeriodSearch) -> Vec<f64> {
    assert!(search.epsilon > 0.0);
    assert!(search.grid_step > 0.0);
    let (lo, hi) = search.range;
    assert!(hi >= lo);
    let count = ((hi - lo) / search.grid_step).floor() as i64 + 1;
    let n_window = (search.window / search.eval_step).ceil() as i64;
    (0..count)
        .into_par_iter()
        .filter_map(|j| {
            let tau = lo + j as f64 * search.grid_step;
            // Early-exit scan of the window.
            for i in -n_window..=n_window {
                let t = i as f64 * search.eval_step;
                if phi.pointwise_distance(phi, t, tau) >= search.epsilon {
                    return None;
                }
            }
            Some(tau)
        })
        .collect()
}
