//! Propagators of the linear part `x' = A(t) x`, fitted exponential
//! dichotomy certificates, and the gap between the time-compressed flow
//! and the flow of the averaged operator.
//!
//! Propagators are integrated with classical RK4 plus a step-doubling
//! sentinel: every public entry point integrates twice (at `h` and
//! `h/2`), compares the results, and refuses to return an answer whose
//! error estimate exceeds [`PROPAGATOR_TOLERANCE`].  A too-coarse step is
//! an error, never a silently wrong matrix.
//!
//! A dichotomy certificate `(N, nu)` asserts `||G(t, tau)|| <= N
//! e^{-nu (t - tau)}` for the whole shifted family of operators.  The fit
//! samples norms over a base grid spanning one slow cycle and a
//! separation grid that is fine near zero and reaches far enough to pin
//! the decay rate.  The rate grid is capped by the decay actually
//! observed at large separations; within that cap we prefer the largest
//! rate whose prefactor stays within a fixed headroom of the best one, so
//! certificates stay tight instead of trading a huge `N` for a marginally
//! larger `nu`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::coefficients::TimeVaryingOperator;
use crate::linalg::{hurwitz_check, mat_exp, operator_norm, LinalgError};
use crate::numerics::linear_fit;

/// Relative error budget for the step-doubling sentinel.
pub const PROPAGATOR_TOLERANCE: f64 = 1e-6;

/// A far-separation propagator norm at or above this value disqualifies
/// the operator from carrying a uniform decay certificate.
pub const FAR_NORM_THRESHOLD: f64 = 0.99;

/// Largest separation probed by the rescaled-gap scan.
pub const MAX_GAP_SEPARATION: f64 = 12.0;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(
        "step {step} too coarse over [{tau}, {t}]: error estimate {estimate:.3e} exceeds {PROPAGATOR_TOLERANCE:.0e}"
    )]
    StepSize {
        step: f64,
        tau: f64,
        t: f64,
        estimate: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "no uniform decay: {count} propagator samples at separation >= {min_separation} have norm >= {FAR_NORM_THRESHOLD}"
    )]
    NotUniformlyStable { count: usize, min_separation: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[inline]
fn add_scaled(x: &mut DMatrix<f64>, k: &DMatrix<f64>, c: f64) {
    x.zip_apply(k, |xi, ki| *xi += c * ki);
}

/// One RK4 pass from separation 0, recording the propagator at each
/// checkpoint.  `eval` writes the coefficient matrix at absolute time.
fn rk4_pass<F: Fn(f64, &mut DMatrix<f64>)>(
    eval: &F,
    dim: usize,
    tau: f64,
    checkpoints: &[f64],
    step: f64,
) -> Vec<DMatrix<f64>> {
    let mut x = DMatrix::<f64>::identity(dim, dim);
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut k1 = a.clone();
    let mut k2 = a.clone();
    let mut k3 = a.clone();
    let mut k4 = a.clone();
    let mut tmp = a.clone();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut s = 0.0;
    for &cp in checkpoints {
        let seg = cp - s;
        if seg > 0.0 {
            let n_sub = (seg / step).ceil().max(1.0) as usize;
            let h = seg / n_sub as f64;
            for i in 0..n_sub {
                let t0 = tau + s + i as f64 * h;
                eval(t0, &mut a);
                k1.gemm(1.0, &a, &x, 0.0);
                eval(t0 + 0.5 * h, &mut a);
                tmp.copy_from(&x);
                add_scaled(&mut tmp, &k1, 0.5 * h);
                k2.gemm(1.0, &a, &tmp, 0.0);
                tmp.copy_from(&x);
                add_scaled(&mut tmp, &k2, 0.5 * h);
                k3.gemm(1.0, &a, &tmp, 0.0);
                eval(t0 + h, &mut a);
                tmp.copy_from(&x);
                add_scaled(&mut tmp, &k3, h);
                k4.gemm(1.0, &a, &tmp, 0.0);
                add_scaled(&mut x, &k1, h / 6.0);
                add_scaled(&mut x, &k2, h / 3.0);
                add_scaled(&mut x, &k3, h / 3.0);
                add_scaled(&mut x, &k4, h / 6.0);
            }
            s = cp;
        }
        out.push(x.clone());
    }
    out
}

/// Integrate the propagator to each checkpoint separation (ascending,
/// nonnegative), with the step-doubling sentinel.
fn sweep_checkpoints<F: Fn(f64, &mut DMatrix<f64>)>(
    eval: &F,
    dim: usize,
    tau: f64,
    checkpoints: &[f64],
    step: f64,
) -> Result<Vec<DMatrix<f64>>, FlowError> {
    debug_assert!(checkpoints.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(checkpoints.first().is_none_or(|c| *c >= 0.0));
    if !(step.is_finite() && step > 0.0) {
        return Err(FlowError::InvalidArgument(format!(
            "integration step must be positive, got {step}"
        )));
    }
    let coarse = rk4_pass(eval, dim, tau, checkpoints, step);
    let fine = rk4_pass(eval, dim, tau, checkpoints, 0.5 * step);
    let mut estimate = 0.0_f64;
    for (c, f) in coarse.iter().zip(fine.iter()) {
        estimate = estimate.max((c - f).norm() / (1.0 + f.norm()));
    }
    // NaN fails this comparison too, so divergence is caught here.
    if !(estimate <= PROPAGATOR_TOLERANCE) {
        let t = tau + checkpoints.last().copied().unwrap_or(0.0);
        return Err(FlowError::StepSize {
            step,
            tau,
            t,
            estimate,
        });
    }
    Ok(fine)
}

/// Propagator `G(t, tau)` of `x' = A(s) x`.  For `t < tau` the forward
/// propagator is inverted; the linear flow is always invertible.
pub fn cauchy_operator(
    a: &TimeVaryingOperator,
    t: f64,
    tau: f64,
    step: f64,
) -> Result<DMatrix<f64>, FlowError> {
    let eval = |s: f64, out: &mut DMatrix<f64>| a.eval_into(s, out);
    propagator_of(&eval, a.dim(), t, tau, step)
}

/// Propagator of the time-compressed linear part `x' = A(s / epsilon) x`.
pub fn rescaled_cauchy_operator(
    a: &TimeVaryingOperator,
    epsilon: f64,
    t: f64,
    tau: f64,
    step: f64,
) -> Result<DMatrix<f64>, FlowError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(FlowError::InvalidArgument(format!(
            "time scale must be positive, got {epsilon}"
        )));
    }
    let eval = |s: f64, out: &mut DMatrix<f64>| a.eval_into(s / epsilon, out);
    propagator_of(&eval, a.dim(), t, tau, step)
}

fn propagator_of<F: Fn(f64, &mut DMatrix<f64>)>(
    eval: &F,
    dim: usize,
    t: f64,
    tau: f64,
    step: f64,
) -> Result<DMatrix<f64>, FlowError> {
    if !(t.is_finite() && tau.is_finite()) {
        return Err(FlowError::InvalidArgument(
            "times must be finite".to_string(),
        ));
    }
    if t == tau {
        return Ok(DMatrix::identity(dim, dim));
    }
    let (lo, hi) = if t > tau { (tau, t) } else { (t, tau) };
    let forward = sweep_checkpoints(eval, dim, lo, &[hi - lo], step)?
        .pop()
        .expect("one checkpoint");
    if t > tau {
        Ok(forward)
    } else {
        forward
            .try_inverse()
            .ok_or_else(|| LinalgError::SolveFailed("propagator inversion".to_string()).into())
    }
}

/// Sampling plan for [`fit_dichotomy`].
#[derive(Debug, Clone)]
pub struct DichotomyPlan {
    /// Largest separation probed; decay is certified from data up to here.
    pub max_separation: f64,
    /// Number of base times spread over one slow cycle.
    pub base_count: usize,
    /// Base-time window; defaults to one period of the slowest harmonic.
    pub base_window: Option<f64>,
    /// RK4 step for the propagator sweeps.
    pub step: f64,
    /// Resolution of the decay-rate grid.
    pub nu_grid: usize,
    /// Tie-break factor: prefer the largest rate whose prefactor stays
    /// within this multiple of the smallest prefactor seen on the grid.
    pub headroom: f64,
}

impl Default for DichotomyPlan {
    fn default() -> Self {
        DichotomyPlan {
            max_separation: 30.0,
            base_count: 64,
            base_window: None,
            step: 1e-2,
            nu_grid: 240,
            headroom: 10.0,
        }
    }
}

impl DichotomyPlan {
    /// Base-time window: explicit override, else one period of the
    /// slowest harmonic, else 1 for effectively constant operators.
    /// Capped at `max_separation`.
    pub fn resolved_window(&self, a: &TimeVaryingOperator) -> f64 {
        let derived = a
            .harmonics()
            .iter()
            .map(|h| h.freq.abs())
            .filter(|f| *f > 0.0)
            .fold(f64::INFINITY, f64::min);
        let w = self.base_window.unwrap_or(if derived.is_finite() {
            std::f64::consts::TAU / derived
        } else {
            1.0
        });
        w.min(self.max_separation)
    }

    /// Separation grid: 0, a fine range resolving the first cycles, and a
    /// coarse range out to `max_separation`.
    pub fn separations(&self, window: f64) -> Vec<f64> {
        let mut seps = vec![0.0];
        let fine_end = (4.0 * window).min(self.max_separation);
        let fine_start = window / 32.0;
        for i in 0..32 {
            seps.push(fine_start + (fine_end - fine_start) * i as f64 / 31.0);
        }
        if fine_end < self.max_separation {
            for i in 1..=32 {
                seps.push(fine_end + (self.max_separation - fine_end) * i as f64 / 32.0);
            }
        }
        seps.sort_by(f64::total_cmp);
        seps.dedup();
        seps
    }

    fn validate(&self) -> Result<(), FlowError> {
        if !(self.max_separation.is_finite() && self.max_separation > 0.0)
            || self.base_count == 0
            || !(self.step.is_finite() && self.step > 0.0)
            || self.nu_grid < 2
            || !(self.headroom >= 1.0)
        {
            return Err(FlowError::InvalidArgument(
                "dichotomy plan fields out of range".to_string(),
            ));
        }
        Ok(())
    }
}

/// A fitted uniform decay certificate `||G(t, tau)|| <= n e^{-nu (t - tau)}`.
#[derive(Debug, Clone)]
pub struct DichotomyCertificate {
    pub n: f64,
    pub nu: f64,
    /// Separation at which the certificate is tight on the sample set.
    pub binding_separation: f64,
    pub sample_count: usize,
}

impl DichotomyCertificate {
    /// Certified norm bound at the given separation.
    pub fn envelope(&self, separation: f64) -> f64 {
        self.n * (-self.nu * separation).exp()
    }
}

/// Fit a dichotomy certificate to sampled propagator norms of the shifted
/// family of `a`.
pub fn fit_dichotomy(
    a: &TimeVaryingOperator,
    plan: &DichotomyPlan,
) -> Result<DichotomyCertificate, FlowError> {
    plan.validate()?;
    let window = plan.resolved_window(a);
    let seps = plan.separations(window);
    let bases: Vec<f64> = (0..plan.base_count)
        .map(|i| window * i as f64 / plan.base_count as f64)
        .collect();
    let per_base: Vec<Vec<f64>> = bases
        .par_iter()
        .map(|&tau| {
            let eval = |s: f64, out: &mut DMatrix<f64>| a.eval_into(s, out);
            sweep_checkpoints(&eval, a.dim(), tau, &seps, plan.step)
                .map(|mats| mats.iter().map(operator_norm).collect())
        })
        .collect::<Result<_, _>>()?;

    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(bases.len() * seps.len());
    for norms in &per_base {
        for (s, n) in seps.iter().zip(norms.iter()) {
            if !n.is_finite() {
                return Err(FlowError::InvalidArgument(
                    "propagator norm is not finite".to_string(),
                ));
            }
            samples.push((*s, *n));
        }
    }

    let far_start = 0.5 * plan.max_separation;
    let far: Vec<&(f64, f64)> = samples.iter().filter(|(s, _)| *s >= far_start).collect();
    let unstable = far.iter().filter(|(_, n)| *n >= FAR_NORM_THRESHOLD).count();
    if unstable > 0 {
        return Err(FlowError::NotUniformlyStable {
            count: unstable,
            min_separation: far_start,
        });
    }
    // The observed far decay caps the rate grid: no certified rate may
    // exceed what the data shows at large separations.
    let nu_cap = far
        .iter()
        .map(|(s, n)| -n.ln() / s)
        .fold(f64::INFINITY, f64::min);
    if !(nu_cap.is_finite() && nu_cap > 0.0) {
        return Err(FlowError::InvalidArgument(
            "no usable far-separation samples".to_string(),
        ));
    }

    let log_prefactor = |nu: f64| -> f64 {
        samples
            .iter()
            .map(|(s, n)| n.ln() + nu * s)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let grid: Vec<f64> = (1..=plan.nu_grid)
        .map(|k| nu_cap * k as f64 / plan.nu_grid as f64)
        .collect();
    let log_ns: Vec<f64> = grid.iter().map(|&nu| log_prefactor(nu)).collect();
    let best = log_ns.iter().copied().fold(f64::INFINITY, f64::min);
    let budget = best + plan.headroom.ln();
    let pick = grid
        .iter()
        .zip(log_ns.iter())
        .rev()
        .find(|(_, ln)| **ln <= budget)
        .map(|(nu, ln)| (*nu, *ln))
        .expect("the smallest rate always fits the budget");
    let (nu, log_n) = pick;
    let binding = samples
        .iter()
        .max_by(|x, y| (x.1.ln() + nu * x.0).total_cmp(&(y.1.ln() + nu * y.0)))
        .map(|(s, _)| *s)
        .unwrap_or(0.0);
    Ok(DichotomyCertificate {
        n: log_n.exp().max(1.0),
        nu,
        binding_separation: binding,
        sample_count: samples.len(),
    })
}

/// One row of the rescaled-gap scan: the worst weighted distance between
/// the compressed flow and the averaged flow, with the witnessing pair.
#[derive(Debug, Clone)]
pub struct RescaledGapRow {
    pub epsilon: f64,
    pub gamma0: f64,
    pub n_eps: f64,
    pub witness_t: f64,
    pub witness_tau: f64,
}

/// Rows of [`rescaled_gap`] across time scales, for trend analysis.
#[derive(Debug, Clone, Default)]
pub struct RescaledGapTable {
    pub rows: Vec<RescaledGapRow>,
}

impl RescaledGapTable {
    pub fn push(&mut self, row: RescaledGapRow) {
        self.rows.push(row);
    }

    /// Least-squares slope of `ln n_eps` against `ln epsilon`; the
    /// observed convergence order of the gap.
    pub fn alpha_observed(&self) -> Option<f64> {
        if self.rows.len() < 2 {
            return None;
        }
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.n_eps > 0.0)
            .map(|r| (r.epsilon.ln(), r.n_eps.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        Some(linear_fit(&pts).0)
    }

    /// Gap at the smallest time scale divided by the gap at the largest.
    pub fn decay_ratio(&self) -> Option<f64> {
        let small = self
            .rows
            .iter()
            .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))?;
        let large = self
            .rows
            .iter()
            .max_by(|a, b| a.epsilon.total_cmp(&b.epsilon))?;
        if small.epsilon == large.epsilon || large.n_eps == 0.0 {
            return None;
        }
        Some(small.n_eps / large.n_eps)
    }
}

/// Scan `sup e^{gamma0 (t - tau)} ||G_eps(t, tau) - e^{a_bar (t - tau)}||`
/// over one compressed cycle of base times and separations up to
/// [`MAX_GAP_SEPARATION`].  `gamma0` must sit strictly below the decay
/// rate of the averaged flow or the supremum is infinite by design.
pub fn rescaled_gap(
    a: &TimeVaryingOperator,
    a_bar: &DMatrix<f64>,
    epsilon: f64,
    gamma0: f64,
) -> Result<RescaledGapRow, FlowError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(FlowError::InvalidArgument(format!(
            "time scale must be positive, got {epsilon}"
        )));
    }
    if a_bar.nrows() != a.dim() || a_bar.ncols() != a.dim() {
        return Err(FlowError::InvalidArgument(
            "averaged operator dimension mismatch".to_string(),
        ));
    }
    let (hurwitz, abscissa) = hurwitz_check(a_bar)?;
    if !hurwitz {
        return Err(FlowError::InvalidArgument(
            "averaged operator is not Hurwitz".to_string(),
        ));
    }
    let nu_bar = -abscissa;
    if !(gamma0 >= 0.0 && gamma0 < nu_bar) {
        return Err(FlowError::InvalidArgument(format!(
            "weight rate {gamma0} must lie in [0, {nu_bar}), the averaged decay rate"
        )));
    }

    let slowest = a
        .harmonics()
        .iter()
        .map(|h| h.freq.abs())
        .filter(|f| *f > 0.0)
        .fold(f64::INFINITY, f64::min);
    let window = if slowest.is_finite() {
        std::f64::consts::TAU * epsilon / slowest
    } else {
        epsilon
    };

    let mut seps: Vec<f64> = Vec::new();
    let fine_end = (4.0 * window).min(MAX_GAP_SEPARATION);
    let fine_start = window / 64.0;
    for i in 0..128 {
        seps.push(fine_start + (fine_end - fine_start) * i as f64 / 127.0);
    }
    if fine_end < MAX_GAP_SEPARATION {
        for i in 1..=64 {
            seps.push(fine_end + (MAX_GAP_SEPARATION - fine_end) * i as f64 / 64.0);
        }
    }
    seps.sort_by(f64::total_cmp);
    seps.dedup();

    let targets: Vec<DMatrix<f64>> = seps
        .iter()
        .map(|&s| mat_exp(a_bar, s))
        .collect::<Result<_, _>>()?;
    let step = 1e-2_f64.min(0.1 * epsilon);
    let bases: Vec<f64> = (0..64).map(|i| window * i as f64 / 64.0).collect();

    let per_base: Vec<(f64, f64, f64)> = bases
        .par_iter()
        .map(|&tau| {
            let eval = |s: f64, out: &mut DMatrix<f64>| a.eval_into(s / epsilon, out);
            let mats = sweep_checkpoints(&eval, a.dim(), tau, &seps, step)?;
            let mut worst = (0.0_f64, tau, tau);
            for ((g, e), &s) in mats.iter().zip(targets.iter()).zip(seps.iter()) {
                let v = (gamma0 * s).exp() * operator_norm(&(g - e));
                if v > worst.0 {
                    worst = (v, tau + s, tau);
                }
            }
            Ok(worst)
        })
        .collect::<Result<_, FlowError>>()?;

    let (n_eps, witness_t, witness_tau) = per_base
        .into_iter()
        .fold((0.0, 0.0, 0.0), |acc, w| if w.0 > acc.0 { w } else { acc });
    Ok(RescaledGapRow {
        epsilon,
        gamma0,
        n_eps,
        witness_t,
        witness_tau,
    })
}
