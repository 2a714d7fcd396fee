//! Bounded-Lipschitz distance between empirical laws, resolution floors
//! for finite ensembles, convergence sweeps over the time-scale
//! parameter, and the deviation-vs-distance comparability probe.
//!
//! The distance is taken over test functions with
//! `sup |f| + Lip(f) <= 1`.  In one dimension it is computed exactly:
//! for a fixed budget split `theta` (sup bound `theta`, Lipschitz bound
//! `1 - theta`) the inner maximization over `f` is a linear program
//! whose dual is a chain of weighted total-variation and absolute-value
//! terms anchored at the partial sums of the signed empirical weights.
//! That dual is minimized exactly by dynamic programming on convex
//! piecewise-linear value functions, and the budget split is then
//! optimized by golden section (the value is concave in `theta`).  For
//! two point masses this reproduces the closed form
//! `2 |a - b| / (2 + |a - b|)`.
//!
//! In higher dimension the sliced variant takes the exact distance of
//! one-dimensional projections and maximizes over directions; every
//! projection induces an admissible test function, so this is a true
//! lower bound with no false positives.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::ops::Bound;

use nalgebra::DVector;
use thiserror::Error;

use crate::averaging::AveragedSystem;
use crate::coefficients::{mix64, CoefficientSystem};
use crate::flow::DichotomyCertificate;
use crate::numerics::{fit_through_origin, golden_max, pairwise_mean};
use crate::sde::{
    gaussian_increment, independent_laws, PathEnsemble, SdeError, RECORD_INTERVAL, STEP_FACTOR,
};

/// Golden-section iterations for the budget-split maximization; the
/// bracket shrinks below 1e-13 well before this.
pub const BETA_SPLIT_ITERS: u32 = 72;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible laws: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// Total-order key for f64 map positions (`-0` folded into `+0`).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key(u64);

impl Key {
    fn new(x: f64) -> Key {
        let bits = (x + 0.0).to_bits();
        Key(if bits >> 63 == 1 {
            !bits
        } else {
            bits | (1 << 63)
        })
    }

    fn value(self) -> f64 {
        f64::from_bits(if self.0 >> 63 == 1 {
            self.0 & !(1 << 63)
        } else {
            !self.0
        })
    }
}

/// Convex piecewise-linear function as a sum of weighted hinges:
/// `min_val + sum_left w (p - v)^+ + sum_right w (v - p)^+` with all
/// left keys at most all right keys.
struct SlopeFn {
    left: BTreeMap<Key, f64>,
    right: BTreeMap<Key, f64>,
    left_total: f64,
    right_total: f64,
    min_val: f64,
}

impl SlopeFn {
    fn new() -> SlopeFn {
        SlopeFn {
            left: BTreeMap::new(),
            right: BTreeMap::new(),
            left_total: 0.0,
            right_total: 0.0,
            min_val: 0.0,
        }
    }

    /// Add `d |v - c|`, `d >= 0`: one hinge on each side, then restore
    /// the side ordering by exchanging crossed hinge mass (each exchange
    /// of mass `m` across a gap `g` lifts the minimum by `m g`).
    fn add_abs(&mut self, c: f64, d: f64) {
        if d <= 0.0 {
            return;
        }
        let key = Key::new(c);
        *self.left.entry(key).or_insert(0.0) += d;
        *self.right.entry(key).or_insert(0.0) += d;
        self.left_total += d;
        self.right_total += d;
        loop {
            let Some((&kl, &wl)) = self.left.last_key_value() else {
                break;
            };
            let Some((&kr, &wr)) = self.right.first_key_value() else {
                break;
            };
            if kl <= kr {
                break;
            }
            let m = wl.min(wr);
            self.min_val += m * (kl.value() - kr.value());
            Self::reduce(&mut self.left, kl, m);
            Self::reduce(&mut self.right, kr, m);
            *self.left.entry(kr).or_insert(0.0) += m;
            *self.right.entry(kl).or_insert(0.0) += m;
        }
    }

    fn reduce(map: &mut BTreeMap<Key, f64>, key: Key, m: f64) {
        let w = map.get_mut(&key).expect("hinge present");
        *w -= m;
        if *w <= 0.0 {
            map.remove(&key);
        }
    }

    /// Infimal convolution with `s |.|`: clip slopes to `[-s, s]` by
    /// shedding the outermost hinge mass.  The minimum is untouched.
    fn clip(&mut self, s: f64) {
        // Running totals can drift from the map sums by an ulp or two,
        // so an empty map ends the loop rather than being a panic.
        while self.left_total > s {
            let Some((&key, &w)) = self.left.first_key_value() else {
                self.left_total = 0.0;
                break;
            };
            let take = w.min(self.left_total - s);
            Self::reduce(&mut self.left, key, take);
            self.left_total -= take;
        }
        while self.right_total > s {
            let Some((&key, &w)) = self.right.last_key_value() else {
                self.right_total = 0.0;
                break;
            };
            let take = w.min(self.right_total - s);
            Self::reduce(&mut self.right, key, take);
            self.right_total -= take;
        }
    }

    fn value_at(&self, v: f64) -> f64 {
        let kv = Key::new(v);
        let mut val = self.min_val;
        for (k, w) in self.left.range((Bound::Excluded(kv), Bound::Unbounded)) {
            val += w * (k.value() - v);
        }
        for (k, w) in self.right.range((Bound::Unbounded, Bound::Excluded(kv))) {
            val += w * (v - k.value());
        }
        val
    }
}

/// Merged signed support of two scalar sample sets: positions ascending,
/// weights `+1/n_a` and `-1/n_b` combined at equal positions, zero
/// weights dropped.  Total weight is zero by construction.
fn signed_support(a: &[f64], b: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::InvalidArgument(
            "laws need at least one sample each".to_string(),
        ));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(MetricsError::InvalidArgument(
            "samples must be finite".to_string(),
        ));
    }
    let wa = 1.0 / a.len() as f64;
    let wb = -1.0 / b.len() as f64;
    let mut pts: Vec<(f64, f64)> = a
        .iter()
        .map(|&x| (x, wa))
        .chain(b.iter().map(|&x| (x, wb)))
        .collect();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (x, w) in pts {
        match merged.last_mut() {
            Some(last) if last.0 == x => last.1 += w,
            _ => merged.push((x, w)),
        }
    }
    merged.retain(|p| p.1 != 0.0);
    Ok(merged)
}

/// Inner value for a fixed budget split: sup bound `theta`, Lipschitz
/// bound `1 - theta`.  Exact via the dual chain minimization.
fn split_value(support: &[(f64, f64)], theta: f64) -> f64 {
    let s = theta;
    let l = 1.0 - theta;
    let mut m = SlopeFn::new();
    m.add_abs(0.0, s);
    let mut c = 0.0;
    for i in 0..support.len().saturating_sub(1) {
        if i > 0 {
            m.clip(s);
        }
        c += support[i].1;
        m.add_abs(c, l * (support[i + 1].0 - support[i].0));
    }
    m.clip(s);
    m.value_at(0.0)
}

fn beta_scalar(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let support = signed_support(a, b)?;
    if support.len() < 2 {
        return Ok(0.0);
    }
    let (_, value) = golden_max(
        &mut |theta| split_value(&support, theta),
        0.0,
        1.0,
        BETA_SPLIT_ITERS,
    );
    Ok(value.max(0.0))
}

/// An empirical law: a finite set of points in R^d with equal weights.
#[derive(Debug, Clone)]
pub struct EmpiricalLaw {
    points: Vec<DVector<f64>>,
    dim: usize,
}

impl EmpiricalLaw {
    pub fn from_points(points: Vec<DVector<f64>>) -> Result<Self, MetricsError> {
        let dim = points.first().map(|p| p.len()).ok_or_else(|| {
            MetricsError::InvalidArgument("a law needs at least one point".to_string())
        })?;
        if dim == 0 || dim > crate::linalg::MAX_DIMENSION {
            return Err(MetricsError::InvalidArgument(format!(
                "dimension {dim} is outside 1..=16"
            )));
        }
        if points
            .iter()
            .any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite()))
        {
            return Err(MetricsError::InvalidArgument(
                "points must share a dimension and be finite".to_string(),
            ));
        }
        Ok(EmpiricalLaw { points, dim })
    }

    pub fn from_scalars(samples: &[f64]) -> Result<Self, MetricsError> {
        Self::from_points(
            samples
                .iter()
                .map(|&x| DVector::from_vec(vec![x]))
                .collect(),
        )
    }

    /// Marginal law of an ensemble at one recorded time.
    pub fn from_ensemble(ens: &PathEnsemble, step: usize) -> Self {
        EmpiricalLaw {
            points: ens.marginal(step),
            dim: ens.dim(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    fn projected(&self, direction: &DVector<f64>) -> Vec<f64> {
        self.points.iter().map(|p| direction.dot(p)).collect()
    }
}

/// Sampling parameters for distances, floors and sweeps.
#[derive(Debug, Clone)]
pub struct BetaProbe {
    /// Random projection directions tried beyond the coordinate axes
    /// when the dimension exceeds one.
    pub directions: usize,
    /// Split-half shuffles behind the resolution floor.
    pub shuffles: usize,
    pub seed: u64,
}

impl Default for BetaProbe {
    fn default() -> Self {
        BetaProbe {
            directions: 32,
            shuffles: 5,
            seed: 0xbe7a_d157,
        }
    }
}

fn check_dims(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<usize, MetricsError> {
    if a.dim != b.dim {
        return Err(MetricsError::Mismatch(format!(
            "laws live in dimensions {} and {}",
            a.dim, b.dim
        )));
    }
    Ok(a.dim)
}

/// Exact one-dimensional bounded-Lipschitz distance.
pub fn beta_exact(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<f64, MetricsError> {
    if check_dims(a, b)? != 1 {
        return Err(MetricsError::InvalidArgument(
            "the exact solver handles dimension one; use beta_distance".to_string(),
        ));
    }
    let sa: Vec<f64> = a.points.iter().map(|p| p[0]).collect();
    let sb: Vec<f64> = b.points.iter().map(|p| p[0]).collect();
    beta_scalar(&sa, &sb)
}

/// Sliced lower bound: the largest exact distance over one-dimensional
/// projections (coordinate axes plus `probe.directions` random unit
/// vectors).  Agrees with [`beta_exact`] in dimension one.
pub fn beta_lower_bound(
    a: &EmpiricalLaw,
    b: &EmpiricalLaw,
    probe: &BetaProbe,
) -> Result<f64, MetricsError> {
    let d = check_dims(a, b)?;
    let mut directions: Vec<DVector<f64>> = (0..d)
        .map(|i| {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            e
        })
        .collect();
    if d > 1 {
        for k in 0..probe.directions {
            let u = DVector::from_iterator(
                d,
                (0..d).map(|c| gaussian_increment(probe.seed, k as u64, -2, c as u64)),
            );
            let norm = u.norm();
            if norm > 1e-9 {
                directions.push(u / norm);
            }
        }
    }
    let mut best = 0.0_f64;
    for u in &directions {
        best = best.max(beta_scalar(&a.projected(u), &b.projected(u))?);
    }
    Ok(best)
}

/// The distance used throughout: exact in dimension one, the sliced
/// lower bound above it.
pub fn beta_distance(
    a: &EmpiricalLaw,
    b: &EmpiricalLaw,
    probe: &BetaProbe,
) -> Result<f64, MetricsError> {
    if check_dims(a, b)? == 1 {
        beta_exact(a, b)
    } else {
        beta_lower_bound(a, b, probe)
    }
}

/// What a distance of zero looks like at this sample size: pool both
/// laws, split the pool at random into the original sizes, and average
/// the distance between the halves over shuffles.  Measurements should
/// be read relative to this floor.
pub fn noise_floor(
    a: &EmpiricalLaw,
    b: &EmpiricalLaw,
    probe: &BetaProbe,
) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    if probe.shuffles == 0 {
        return Err(MetricsError::InvalidArgument(
            "the floor needs at least one shuffle".to_string(),
        ));
    }
    let mut pool: Vec<&DVector<f64>> = a.points.iter().chain(b.points.iter()).collect();
    let mut values = Vec::with_capacity(probe.shuffles);
    for shuffle in 0..probe.shuffles {
        for j in (1..pool.len()).rev() {
            let r = mix64(
                probe
                    .seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(shuffle as u64)
                    .wrapping_add((j as u64) << 32),
            ) as usize
                % (j + 1);
            pool.swap(j, r);
        }
        let half_a = EmpiricalLaw {
            points: pool[..a.len()].iter().map(|p| (*p).clone()).collect(),
            dim: a.dim,
        };
        let half_b = EmpiricalLaw {
            points: pool[a.len()..].iter().map(|p| (*p).clone()).collect(),
            dim: a.dim,
        };
        values.push(beta_distance(&half_a, &half_b, probe)?);
    }
    Ok(pairwise_mean(&values))
}

/// One measurement in a convergence sweep.
#[derive(Debug, Clone)]
pub struct LawSweepRow {
    pub epsilon: f64,
    /// Recorded time nearest the requested probe time.
    pub t: f64,
    pub beta: f64,
    pub noise_floor: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone)]
pub struct LawSweep {
    pub rows: Vec<LawSweepRow>,
}

impl LawSweep {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epsilon,t,beta,noise_floor,n_samples")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.12e},{:.12e},{:.12e},{:.12e},{}",
                r.epsilon, r.t, r.beta, r.noise_floor, r.n_samples
            )?;
        }
        Ok(())
    }

    /// Rows at the epsilon extremes for a fixed probe time, paired as
    /// (coarsest, finest); used to judge whether the distance decays.
    pub fn extremes_at(&self, t: f64) -> Option<(&LawSweepRow, &LawSweepRow)> {
        let at: Vec<&LawSweepRow> = self
            .rows
            .iter()
            .filter(|r| (r.t - t).abs() <= 1e-9 + 0.05 * t.abs())
            .collect();
        let coarse = at
            .iter()
            .copied()
            .max_by(|a, b| a.epsilon.total_cmp(&b.epsilon))?;
        let fine = at
            .iter()
            .copied()
            .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))?;
        if coarse.epsilon > fine.epsilon {
            Some((coarse, fine))
        } else {
            None
        }
    }
}

/// Measure the law distance between the compressed and averaged
/// solutions at the requested times, for each time scale, together with
/// the matching resolution floors.  The two ensembles draw independent
/// Brownian motions: this is a statement about laws, and coupling the
/// draws would correlate the sampling errors and understate the
/// distance.
pub fn law_convergence_sweep(
    sys: &CoefficientSystem,
    avg: &AveragedSystem,
    cert: &DichotomyCertificate,
    epsilons: &[f64],
    probe_times: &[f64],
    n_paths: usize,
    probe: &BetaProbe,
) -> Result<LawSweep, MetricsError> {
    if epsilons.is_empty() || probe_times.is_empty() {
        return Err(MetricsError::InvalidArgument(
            "sweep needs at least one time scale and one probe time".to_string(),
        ));
    }
    if probe_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(MetricsError::InvalidArgument(
            "probe times must be finite and nonnegative".to_string(),
        ));
    }
    let horizon = probe_times.iter().copied().fold(f64::MIN, f64::max).max(1e-6);
    let mut rows = Vec::with_capacity(epsilons.len() * probe_times.len());
    for &eps in epsilons {
        let dt = STEP_FACTOR * eps;
        let stride = (RECORD_INTERVAL / dt).round().max(1.0) as usize;
        let run = independent_laws(
            sys, avg, eps, cert, horizon, dt, stride, n_paths, probe.seed,
        )?;
        for &t in probe_times {
            let times = run.rescaled.times();
            let k = (0..times.len())
                .min_by(|&i, &j| (times[i] - t).abs().total_cmp(&(times[j] - t).abs()))
                .expect("nonempty grid");
            let a = EmpiricalLaw::from_ensemble(&run.rescaled, k);
            let b = EmpiricalLaw::from_ensemble(&run.averaged, k);
            rows.push(LawSweepRow {
                epsilon: eps,
                t: times[k],
                beta: beta_distance(&a, &b, probe)?,
                noise_floor: noise_floor(&a, &b, probe)?,
                n_samples: n_paths,
            });
        }
    }
    Ok(LawSweep { rows })
}

/// One deviation-vs-distance pair with its floor.
#[derive(Debug, Clone)]
pub struct ComparabilityRow {
    pub deviation: f64,
    pub beta: f64,
    pub noise_floor: f64,
    pub within: bool,
}

/// Outcome of the comparability probe: the through-origin scale relating
/// floor-adjusted distances to pathwise deviations, and whether every
/// measurement sits below `scale * deviation + 2 * floor`.
#[derive(Debug, Clone)]
pub struct ComparabilityReport {
    pub scale: f64,
    pub rows: Vec<ComparabilityRow>,
    pub pass: bool,
}

/// Judge whether law distances are controlled by pathwise deviations
/// across a family of measurements `(deviation, beta, floor)`.  The
/// probe is diagnostic: it never fails an individual run, it reports.
pub fn comparability_probe(
    measurements: &[(f64, f64, f64)],
) -> Result<ComparabilityReport, MetricsError> {
    if measurements.is_empty() {
        return Err(MetricsError::InvalidArgument(
            "comparability needs at least one measurement".to_string(),
        ));
    }
    if measurements
        .iter()
        .any(|(d, b, f)| !(d.is_finite() && b.is_finite() && f.is_finite()) || *d < 0.0 || *b < 0.0 || *f < 0.0)
    {
        return Err(MetricsError::InvalidArgument(
            "measurements must be finite and nonnegative".to_string(),
        ));
    }
    let pts: Vec<(f64, f64)> = measurements
        .iter()
        .map(|&(d, b, f)| (d, (b - f).max(0.0)))
        .collect();
    let (raw_scale, _) = fit_through_origin(&pts);
    let scale = raw_scale.max(0.0);
    let rows: Vec<ComparabilityRow> = measurements
        .iter()
        .map(|&(deviation, beta, floor)| ComparabilityRow {
            deviation,
            beta,
            noise_floor: floor,
            within: beta <= scale * deviation + 2.0 * floor + 1e-12,
        })
        .collect();
    let pass = rows.iter().all(|r| r.within);
    Ok(ComparabilityReport { scale, rows, pass })
}
