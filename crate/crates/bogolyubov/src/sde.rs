//! Euler-Maruyama ensembles for the original, time-compressed and
//! averaged equations, a stochastic-convolution integrator for the
//! state-independent case, burn-in bookkeeping for bounded solutions,
//! and exact Gaussian sampling of the averaged stationary law.
//!
//! All Brownian increments are counter-based: the increment for (seed,
//! path, step) is a pure hash of those values, where `step` is the
//! absolute grid index `round(t / dt)`.  Two runs with the same seed and
//! step size therefore share increments wherever their grids overlap,
//! regardless of thread count, burn-in length, or which equation is
//! being driven.  This is what makes coupled comparisons (compressed vs
//! averaged, short vs long burn-in, Euler vs convolution) exact couplings
//! rather than independent reruns.
//!
//! The driving noise is a single scalar Brownian motion per path; the
//! diffusion coefficient is a vector acting on it.  The stationary
//! covariance of the averaged linear system is accordingly the solution
//! of a Lyapunov equation with the rank-one forcing `g g'`.

use std::io::{self, Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::averaging::AveragedSystem;
use crate::coefficients::{mix64, unit_from, CoefficientSystem};
use crate::flow::DichotomyCertificate;
use crate::linalg::{lyapunov_stationary_cov, mat_exp, symmetric_sqrt, LinalgError};
use crate::numerics::{fit_through_origin, pairwise_mean};

/// Paths whose norm exceeds this are reported as divergent.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Step ceiling for the original and averaged equations, whose
/// coefficients vary on the unit time scale.
pub const UNIT_CLOCK_MAX_STEP: f64 = 0.1;

/// Step ceiling factor for the compressed equation: `dt <= 0.1 epsilon`.
pub const COMPRESSED_STEP_FACTOR: f64 = 0.1;

/// Burn-in is sized so the initial-condition bias falls to this fraction
/// of the bounded-solution radius.
pub const BURN_IN_ATTENUATION: f64 = 100.0;

/// Default step policy for the compressed equation: `dt = 0.05 epsilon`
/// puts twenty steps inside the fastest unit-frequency oscillation, half
/// the admissible ceiling.
pub const STEP_FACTOR: f64 = 0.05;

/// Default spacing of recorded states on the compressed clock.
pub const RECORD_INTERVAL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("step {dt} exceeds the admissible ceiling {limit} for this equation")]
    StepTooCoarse { dt: f64, limit: f64 },
    #[error("path {path} exceeded |x| = {DIVERGENCE_GUARD:.0e} at t = {t}")]
    Diverged { path: usize, t: f64 },
    #[error("incompatible ensembles: {0}")]
    Mismatch(String),
    #[error("malformed dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Which equation an ensemble solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Equation {
    /// Slow original equation: drift `eps (A(t) x + F(t, x))`, noise
    /// `sqrt(eps) G(t, x)`.
    Original { epsilon: f64 },
    /// Time-compressed equation: coefficients evaluated at `t / eps`,
    /// noise unscaled.
    Rescaled { epsilon: f64 },
    /// Autonomous averaged equation.
    Averaged,
}

impl Equation {
    pub fn epsilon(&self) -> Option<f64> {
        match self {
            Equation::Original { epsilon } | Equation::Rescaled { epsilon } => Some(*epsilon),
            Equation::Averaged => None,
        }
    }

    fn step_ceiling(&self) -> f64 {
        match self {
            Equation::Rescaled { epsilon } => COMPRESSED_STEP_FACTOR * epsilon,
            _ => UNIT_CLOCK_MAX_STEP,
        }
    }

    fn validate(&self, sys: Option<&CoefficientSystem>) -> Result<(), SdeError> {
        if let Some(eps) = self.epsilon() {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(SdeError::InvalidArgument(format!(
                    "time scale must be positive, got {eps}"
                )));
            }
            if let Some(sys) = sys {
                if eps > sys.eps0 {
                    return Err(SdeError::InvalidArgument(format!(
                        "time scale {eps} exceeds the system's admissible ceiling {}",
                        sys.eps0
                    )));
                }
            }
        }
        Ok(())
    }

    fn tag(&self) -> u64 {
        match self {
            Equation::Original { .. } => 0,
            Equation::Rescaled { .. } => 1,
            Equation::Averaged => 2,
        }
    }
}

/// Grid and ensemble-size parameters for a simulation.
#[derive(Debug, Clone)]
pub struct EmPlan {
    /// Start time; must be an integer multiple of `dt` so that increments
    /// are shared across runs (see the module docs).
    pub t0: f64,
    pub dt: f64,
    /// Total number of integration substeps.
    pub steps: usize,
    /// Record every this many substeps; must divide `steps`.
    pub record_stride: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl EmPlan {
    fn validate(&self, equation: &Equation) -> Result<(), SdeError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SdeError::InvalidArgument(format!(
                "step must be positive, got {}",
                self.dt
            )));
        }
        let limit = equation.step_ceiling();
        if self.dt > limit * (1.0 + 1e-12) {
            return Err(SdeError::StepTooCoarse {
                dt: self.dt,
                limit,
            });
        }
        if self.steps == 0 || self.n_paths == 0 || self.record_stride == 0 {
            return Err(SdeError::InvalidArgument(
                "steps, paths and stride must all be positive".to_string(),
            ));
        }
        if self.steps % self.record_stride != 0 {
            return Err(SdeError::InvalidArgument(format!(
                "stride {} does not divide step count {}",
                self.record_stride, self.steps
            )));
        }
        let ratio = self.t0 / self.dt;
        if !self.t0.is_finite() || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(SdeError::InvalidArgument(format!(
                "start time {} is not a grid multiple of the step {}",
                self.t0, self.dt
            )));
        }
        Ok(())
    }

    fn base_index(&self) -> i64 {
        (self.t0 / self.dt).round() as i64
    }

    fn n_recorded(&self) -> usize {
        self.steps / self.record_stride + 1
    }

    fn recorded_times(&self) -> Vec<f64> {
        (0..self.n_recorded())
            .map(|i| self.t0 + (i * self.record_stride) as f64 * self.dt)
            .collect()
    }
}

/// Standard normal draw for (seed, path, step, component), pure in its
/// arguments.
pub(crate) fn gaussian_increment(seed: u64, path: u64, step: i64, component: u64) -> f64 {
    let mut h = mix64(seed ^ 0x6a09_e667_f3bc_c908);
    h = mix64(h ^ path.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h = mix64(h ^ (step as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    h = mix64(h ^ component.wrapping_mul(0x94d0_49bb_1331_11eb));
    let u1 = unit_from(h);
    let u2 = unit_from(mix64(h ^ 0xd6e8_feb8_6659_fd93));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A simulated ensemble: `n_paths` trajectories sampled on a common time
/// grid, stored flat as (path, time, component).
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub equation: Equation,
    pub seed: u64,
    times: Vec<f64>,
    dim: usize,
    n_paths: usize,
    data: Vec<f64>,
}

impl PathEnsemble {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn terminal_step(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.times.len() + step) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// One scalar component across paths at a fixed time.
    pub fn marginal_component(&self, step: usize, component: usize) -> Vec<f64> {
        (0..self.n_paths)
            .map(|p| self.state(p, step)[component])
            .collect()
    }

    /// Full state across paths at a fixed time.
    pub fn marginal(&self, step: usize) -> Vec<DVector<f64>> {
        (0..self.n_paths)
            .map(|p| DVector::from_column_slice(self.state(p, step)))
            .collect()
    }

    pub fn mean_state(&self, step: usize) -> DVector<f64> {
        let mut out = DVector::<f64>::zeros(self.dim);
        let mut buf = vec![0.0; self.n_paths];
        for c in 0..self.dim {
            for (b, p) in buf.iter_mut().zip(0..self.n_paths) {
                *b = self.state(p, step)[c];
            }
            out[c] = pairwise_mean(&buf);
        }
        out
    }

    /// Per-path squared norms `|X_p(t_step)|^2`, in path order.
    pub fn squared_norms(&self, step: usize) -> Vec<f64> {
        (0..self.n_paths)
            .map(|p| self.state(p, step).iter().map(|x| x * x).sum::<f64>())
            .collect()
    }

    pub fn mean_square_norm(&self, step: usize) -> f64 {
        pairwise_mean(&self.squared_norms(step))
    }

    /// Per-path squared distances to a coupled ensemble at one recorded
    /// time, in path order.
    pub fn squared_deviations_from(
        &self,
        other: &PathEnsemble,
        step: usize,
    ) -> Result<Vec<f64>, SdeError> {
        self.check_aligned(other)?;
        Ok((0..self.n_paths)
            .map(|p| {
                self.state(p, step)
                    .iter()
                    .zip(other.state(p, step))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect())
    }

    /// Root-mean-square pathwise distance to a coupled ensemble at one
    /// recorded time.
    pub fn rms_deviation_from(&self, other: &PathEnsemble, step: usize) -> Result<f64, SdeError> {
        Ok(pairwise_mean(&self.squared_deviations_from(other, step)?).sqrt())
    }

    fn check_aligned(&self, other: &PathEnsemble) -> Result<(), SdeError> {
        if self.dim != other.dim
            || self.n_paths != other.n_paths
            || self.times.len() != other.times.len()
            || self
                .times
                .iter()
                .zip(other.times.iter())
                .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(SdeError::Mismatch(
                "ensembles differ in dimension, path count or time grid".to_string(),
            ));
        }
        Ok(())
    }

    /// Keep only recorded times at or after `t_start`.
    pub fn tail_from(&self, t_start: f64) -> Result<PathEnsemble, SdeError> {
        let first = self
            .times
            .iter()
            .position(|t| *t >= t_start - 1e-12)
            .ok_or_else(|| {
                SdeError::InvalidArgument(format!("no recorded times at or after {t_start}"))
            })?;
        let kept = self.times.len() - first;
        let mut data = Vec::with_capacity(self.n_paths * kept * self.dim);
        for p in 0..self.n_paths {
            let start = (p * self.times.len() + first) * self.dim;
            data.extend_from_slice(&self.data[start..start + kept * self.dim]);
        }
        Ok(PathEnsemble {
            equation: self.equation,
            seed: self.seed,
            times: self.times[first..].to_vec(),
            dim: self.dim,
            n_paths: self.n_paths,
            data,
        })
    }

    /// Reinterpret a slow-clock ensemble on the compressed clock via
    /// `t_compressed = eps * t_original`.  The two processes agree in law,
    /// so this is pure bookkeeping on the time axis.
    pub fn to_rescaled_clock(self) -> Result<PathEnsemble, SdeError> {
        match self.equation {
            Equation::Original { epsilon } => Ok(PathEnsemble {
                equation: Equation::Rescaled { epsilon },
                times: self.times.iter().map(|t| epsilon * t).collect(),
                ..self
            }),
            _ => Err(SdeError::InvalidArgument(
                "only slow-clock ensembles can be moved to the compressed clock".to_string(),
            )),
        }
    }

    /// Inverse of [`Self::to_rescaled_clock`].
    pub fn to_original_clock(self) -> Result<PathEnsemble, SdeError> {
        match self.equation {
            Equation::Rescaled { epsilon } => Ok(PathEnsemble {
                equation: Equation::Original { epsilon },
                times: self.times.iter().map(|t| t / epsilon).collect(),
                ..self
            }),
            _ => Err(SdeError::InvalidArgument(
                "only compressed-clock ensembles can be moved to the slow clock".to_string(),
            )),
        }
    }

    /// Plain text rows `path_id,t,x_1,...,x_d` with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "path_id,t")?;
        for c in 1..=self.dim {
            write!(w, ",x_{c}")?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for (k, t) in self.times.iter().enumerate() {
                write!(w, "{p},{t:.12e}")?;
                for v in self.state(p, k) {
                    write!(w, ",{v:.12e}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Binary dump: magic `BGLYB1\0\0`, then little-endian `dim`,
    /// `n_paths`, `n_times`, `seed` as u64, an equation tag u64 and its
    /// time scale as f64, then times and path data as f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(b"BGLYB1\0\0")?;
        for v in [
            self.dim as u64,
            self.n_paths as u64,
            self.times.len() as u64,
            self.seed,
            self.equation.tag(),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.equation.epsilon().unwrap_or(0.0).to_le_bytes())?;
        for t in &self.times {
            w.write_all(&t.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<PathEnsemble, SdeError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"BGLYB1\0\0" {
            return Err(SdeError::Format("bad magic".to_string()));
        }
        let mut u = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64, SdeError> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let dim = read_u64(&mut r)? as usize;
        let n_paths = read_u64(&mut r)? as usize;
        let n_times = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let tag = read_u64(&mut r)?;
        let mut f = [0u8; 8];
        r.read_exact(&mut f)?;
        let epsilon = f64::from_le_bytes(f);
        let equation = match tag {
            0 => Equation::Original { epsilon },
            1 => Equation::Rescaled { epsilon },
            2 => Equation::Averaged,
            other => return Err(SdeError::Format(format!("unknown equation tag {other}"))),
        };
        if dim == 0 || dim > crate::linalg::MAX_DIMENSION || n_paths == 0 || n_times == 0 {
            return Err(SdeError::Format("header out of range".to_string()));
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>, SdeError> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let times = read_f64s(n_times)?;
        let data = read_f64s(n_paths * n_times * dim)?;
        Ok(PathEnsemble {
            equation,
            seed,
            times,
            dim,
            n_paths,
            data,
        })
    }
}

/// Core Euler-Maruyama loop; drift and diffusion write into caller
/// buffers, `scratch` is theirs to clobber.
fn run_em<D, S>(
    dim: usize,
    equation: Equation,
    plan: &EmPlan,
    x0: &DVector<f64>,
    drift: D,
    diffusion: S,
) -> Result<PathEnsemble, SdeError>
where
    D: Fn(f64, &DVector<f64>, &mut DVector<f64>, &mut DVector<f64>) + Sync,
    S: Fn(f64, &DVector<f64>, &mut DVector<f64>, &mut DVector<f64>) + Sync,
{
    plan.validate(&equation)?;
    if x0.len() != dim || x0.iter().any(|v| !v.is_finite()) {
        return Err(SdeError::InvalidArgument(
            "initial state has wrong dimension or non-finite entries".to_string(),
        ));
    }
    let n_rec = plan.n_recorded();
    let base = plan.base_index();
    let sqrt_dt = plan.dt.sqrt();
    let mut data = vec![0.0_f64; plan.n_paths * n_rec * dim];
    data.par_chunks_mut(n_rec * dim)
        .enumerate()
        .map(|(p, chunk)| {
            let mut x = x0.clone();
            let mut mu = DVector::<f64>::zeros(dim);
            let mut sig = DVector::<f64>::zeros(dim);
            let mut scratch = DVector::<f64>::zeros(dim);
            chunk[..dim].copy_from_slice(x.as_slice());
            for k in 0..plan.steps {
                let t = plan.t0 + k as f64 * plan.dt;
                drift(t, &x, &mut mu, &mut scratch);
                diffusion(t, &x, &mut sig, &mut scratch);
                let dw = sqrt_dt * gaussian_increment(plan.seed, p as u64, base + k as i64, 0);
                for i in 0..dim {
                    x[i] += mu[i] * plan.dt + sig[i] * dw;
                }
                if x.norm_squared() > DIVERGENCE_GUARD * DIVERGENCE_GUARD {
                    return Err(SdeError::Diverged {
                        path: p,
                        t: t + plan.dt,
                    });
                }
                if (k + 1) % plan.record_stride == 0 {
                    let slot = (k + 1) / plan.record_stride;
                    chunk[slot * dim..(slot + 1) * dim].copy_from_slice(x.as_slice());
                }
            }
            Ok(())
        })
        .collect::<Result<(), SdeError>>()?;
    Ok(PathEnsemble {
        equation,
        seed: plan.seed,
        times: plan.recorded_times(),
        dim,
        n_paths: plan.n_paths,
        data,
    })
}

/// Euler-Maruyama ensemble for the original or compressed equation.
pub fn simulate_system(
    sys: &CoefficientSystem,
    equation: Equation,
    plan: &EmPlan,
    x0: &DVector<f64>,
) -> Result<PathEnsemble, SdeError> {
    equation.validate(Some(sys))?;
    match equation {
        Equation::Original { epsilon } => run_em(
            sys.dim(),
            equation,
            plan,
            x0,
            |t, x, out, scr| {
                sys.drift.eval_into(t, x, out, scr);
                sys.operator.apply_into(t, x, out, 1.0);
                *out *= epsilon;
            },
            |t, x, out, scr| {
                sys.diffusion.eval_into(t, x, out, scr);
                *out *= epsilon.sqrt();
            },
        ),
        Equation::Rescaled { epsilon } => run_em(
            sys.dim(),
            equation,
            plan,
            x0,
            |t, x, out, scr| {
                let s = t / epsilon;
                sys.drift.eval_into(s, x, out, scr);
                sys.operator.apply_into(s, x, out, 1.0);
            },
            |t, x, out, scr| sys.diffusion.eval_into(t / epsilon, x, out, scr),
        ),
        Equation::Averaged => Err(SdeError::InvalidArgument(
            "use simulate_averaged for the averaged equation".to_string(),
        )),
    }
}

/// Euler-Maruyama ensemble for the autonomous averaged equation.
pub fn simulate_averaged(
    avg: &AveragedSystem,
    plan: &EmPlan,
    x0: &DVector<f64>,
) -> Result<PathEnsemble, SdeError> {
    run_em(
        avg.dim(),
        Equation::Averaged,
        plan,
        x0,
        |_t, x, out, scr| {
            avg.f_bar.eval_into(0.0, x, out, scr);
            out.gemv(1.0, &avg.a_bar, x, 1.0);
        },
        |_t, x, out, scr| avg.g_bar.eval_into(0.0, x, out, scr),
    )
}

/// Burn-in metadata for a bounded-solution run.
#[derive(Debug, Clone)]
pub struct BurnIn {
    /// Burn-in duration in the equation's own clock.
    pub duration: f64,
    /// Certified bound on the initial-condition bias that remains at the
    /// start of the recorded window.
    pub bias_bound: f64,
}

fn decay_rate_for(equation: &Equation, cert: &DichotomyCertificate) -> Result<f64, SdeError> {
    match equation {
        Equation::Original { epsilon } => Ok(epsilon * cert.nu),
        Equation::Rescaled { .. } => Ok(cert.nu),
        Equation::Averaged => Err(SdeError::InvalidArgument(
            "bounded-solution runs apply to the time-dependent equations".to_string(),
        )),
    }
}

/// Approximate the bounded solution over `[0, horizon]`: burn in from the
/// origin long enough that the dichotomy contracts the initial-condition
/// error to 1% of the bounded-solution radius, then record.
#[allow(clippy::too_many_arguments)]
pub fn bounded_solution(
    sys: &CoefficientSystem,
    equation: Equation,
    cert: &DichotomyCertificate,
    radius: f64,
    horizon: f64,
    dt: f64,
    record_stride: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(PathEnsemble, BurnIn), SdeError> {
    let rate = decay_rate_for(&equation, cert)?;
    if !(horizon > 0.0 && horizon.is_finite() && dt > 0.0 && dt.is_finite()) {
        return Err(SdeError::InvalidArgument(
            "horizon and step must be positive".to_string(),
        ));
    }
    let stride = record_stride.max(1);
    let round_up = |n: usize| n.div_ceil(stride) * stride;
    let n_burn = round_up(((BURN_IN_ATTENUATION * cert.n).ln() / rate / dt).ceil() as usize);
    let n_main = round_up((horizon / dt).ceil() as usize);
    let plan = EmPlan {
        t0: -(n_burn as f64) * dt,
        dt,
        steps: n_burn + n_main,
        record_stride: stride,
        n_paths,
        seed,
    };
    let x0 = DVector::<f64>::zeros(sys.dim());
    let full = simulate_system(sys, equation, &plan, &x0)?;
    let ensemble = full.tail_from(0.0)?;
    let duration = n_burn as f64 * dt;
    let burn_in = BurnIn {
        duration,
        bias_bound: cert.n * (-rate * duration).exp() * radius,
    };
    Ok((ensemble, burn_in))
}

/// A coupled pair of runs sharing every Brownian increment: the
/// compressed equation and the averaged one, burned in together from the
/// same start.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub rescaled: PathEnsemble,
    pub averaged: PathEnsemble,
    pub burn_in: BurnIn,
}

/// Per-time deviation summary of a coupled run.
#[derive(Debug, Clone)]
pub struct SolutionStatistics {
    pub times: Vec<f64>,
    /// RMS of the compressed state norm.
    pub rms_state: Vec<f64>,
    /// RMS pathwise distance between the coupled solutions.
    pub rms_deviation: Vec<f64>,
    pub sup_rms_deviation: f64,
    pub terminal_rms_deviation: f64,
}

impl CoupledRun {
    pub fn statistics(&self) -> Result<SolutionStatistics, SdeError> {
        let n = self.rescaled.n_times();
        let mut rms_state = Vec::with_capacity(n);
        let mut rms_dev = Vec::with_capacity(n);
        for k in 0..n {
            rms_state.push(self.rescaled.mean_square_norm(k).sqrt());
            rms_dev.push(self.rescaled.rms_deviation_from(&self.averaged, k)?);
        }
        let sup = rms_dev.iter().copied().fold(0.0_f64, f64::max);
        let terminal = *rms_dev.last().unwrap_or(&0.0);
        Ok(SolutionStatistics {
            times: self.rescaled.times().to_vec(),
            rms_state,
            rms_deviation: rms_dev,
            sup_rms_deviation: sup,
            terminal_rms_deviation: terminal,
        })
    }
}

/// Shared schedule for a compressed/averaged pair: burn in before t = 0
/// long enough that the dichotomy contracts the start-up error per
/// [`BURN_IN_ATTENUATION`], then record over `[0, horizon]`.
#[allow(clippy::too_many_arguments)]
fn paired_plan(
    sys: &CoefficientSystem,
    avg: &AveragedSystem,
    epsilon: f64,
    cert: &DichotomyCertificate,
    horizon: f64,
    dt: f64,
    record_stride: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(EmPlan, Equation, BurnIn), SdeError> {
    if avg.dim() != sys.dim() {
        return Err(SdeError::Mismatch(
            "system and averaged system dimensions differ".to_string(),
        ));
    }
    let equation = Equation::Rescaled { epsilon };
    equation.validate(Some(sys))?;
    let rate = decay_rate_for(&equation, cert)?;
    let stride = record_stride.max(1);
    let round_up = |n: usize| n.div_ceil(stride) * stride;
    let n_burn = round_up(((BURN_IN_ATTENUATION * cert.n).ln() / rate / dt).ceil() as usize);
    let n_main = round_up((horizon / dt).ceil() as usize);
    let plan = EmPlan {
        t0: -(n_burn as f64) * dt,
        dt,
        steps: n_burn + n_main,
        record_stride: stride,
        n_paths,
        seed,
    };
    let duration = n_burn as f64 * dt;
    let burn_in = BurnIn {
        duration,
        bias_bound: cert.n * (-rate * duration).exp(),
    };
    Ok((plan, equation, burn_in))
}

/// Run the compressed and averaged equations on one Brownian motion and
/// one burn-in schedule, so their pathwise difference is meaningful.
#[allow(clippy::too_many_arguments)]
pub fn coupled_deviation(
    sys: &CoefficientSystem,
    avg: &AveragedSystem,
    epsilon: f64,
    cert: &DichotomyCertificate,
    horizon: f64,
    dt: f64,
    record_stride: usize,
    n_paths: usize,
    seed: u64,
) -> Result<CoupledRun, SdeError> {
    let (plan, equation, burn_in) = paired_plan(
        sys,
        avg,
        epsilon,
        cert,
        horizon,
        dt,
        record_stride,
        n_paths,
        seed,
    )?;
    let x0 = DVector::<f64>::zeros(sys.dim());
    let rescaled = simulate_system(sys, equation, &plan, &x0)?.tail_from(0.0)?;
    let averaged = simulate_averaged(avg, &plan, &x0)?.tail_from(0.0)?;
    Ok(CoupledRun {
        rescaled,
        averaged,
        burn_in,
    })
}

/// Seed salt for the averaged equation's Brownian stream in
/// [`independent_laws`]; distinct keys of the counter-based generator
/// give independent streams.
const AVERAGED_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Independently driven runs of the compressed and averaged equations on
/// one burn-in schedule and recording grid.
#[derive(Debug, Clone)]
pub struct LawRuns {
    pub rescaled: PathEnsemble,
    pub averaged: PathEnsemble,
    pub burn_in: BurnIn,
}

/// Run the same pair of equations as [`coupled_deviation`] but on
/// independent Brownian motions.  The marginal laws are unchanged; the
/// joint draw is not: empirical-law comparisons assume the sampling
/// errors of the two ensembles are uncorrelated, and shared increments
/// would cancel noise and bias the measured distance low.
#[allow(clippy::too_many_arguments)]
pub fn independent_laws(
    sys: &CoefficientSystem,
    avg: &AveragedSystem,
    epsilon: f64,
    cert: &DichotomyCertificate,
    horizon: f64,
    dt: f64,
    record_stride: usize,
    n_paths: usize,
    seed: u64,
) -> Result<LawRuns, SdeError> {
    let (plan, equation, burn_in) = paired_plan(
        sys,
        avg,
        epsilon,
        cert,
        horizon,
        dt,
        record_stride,
        n_paths,
        seed,
    )?;
    let averaged_plan = EmPlan {
        seed: seed ^ AVERAGED_STREAM_SALT,
        ..plan.clone()
    };
    let x0 = DVector::<f64>::zeros(sys.dim());
    let rescaled = simulate_system(sys, equation, &plan, &x0)?.tail_from(0.0)?;
    let averaged = simulate_averaged(avg, &averaged_plan, &x0)?.tail_from(0.0)?;
    Ok(LawRuns {
        rescaled,
        averaged,
        burn_in,
    })
}

/// Integrate the state-independent equation through its variation-of-
/// constants form: one-step propagators accumulate the convolution sum
/// `sum_k G(t, t_k) (f dt + g dW)` in Horner fashion.  Shares increments
/// with [`simulate_system`], so their difference isolates integrator
/// bias.
pub fn stochastic_convolution(
    sys: &CoefficientSystem,
    equation: Equation,
    plan: &EmPlan,
    x0: &DVector<f64>,
) -> Result<PathEnsemble, SdeError> {
    equation.validate(Some(sys))?;
    if !sys.drift.is_state_independent() || !sys.diffusion.is_state_independent() {
        return Err(SdeError::InvalidArgument(
            "the convolution form needs state-independent drift and diffusion".to_string(),
        ));
    }
    let (coeff_time, drift_scale, noise_scale): (Box<dyn Fn(f64) -> f64>, f64, f64) =
        match equation {
            Equation::Original { epsilon } => (Box::new(|t| t), epsilon, epsilon.sqrt()),
            Equation::Rescaled { epsilon } => (Box::new(move |t| t / epsilon), 1.0, 1.0),
            Equation::Averaged => {
                return Err(SdeError::InvalidArgument(
                    "use simulate_averaged for the averaged equation".to_string(),
                ))
            }
        };
    plan.validate(&equation)?;
    let dim = sys.dim();
    if x0.len() != dim || x0.iter().any(|v| !v.is_finite()) {
        return Err(SdeError::InvalidArgument(
            "initial state has wrong dimension or non-finite entries".to_string(),
        ));
    }

    // Per-substep shared quantities: the one-step propagator of the
    // scaled linear part and the forcing values at the left endpoint.
    let zero = DVector::<f64>::zeros(dim);
    let mut scratch = DVector::<f64>::zeros(dim);
    let mut propagators = Vec::with_capacity(plan.steps);
    let mut forcings = Vec::with_capacity(plan.steps);
    let mut noises = Vec::with_capacity(plan.steps);
    let eval_scaled = |t: f64, out: &mut DMatrix<f64>| {
        sys.operator.eval_into(coeff_time(t), out);
        *out *= drift_scale;
    };
    let mut m0 = DMatrix::<f64>::zeros(dim, dim);
    let mut m1 = DMatrix::<f64>::zeros(dim, dim);
    let mut m2 = DMatrix::<f64>::zeros(dim, dim);
    for k in 0..plan.steps {
        let t = plan.t0 + k as f64 * plan.dt;
        let h = plan.dt;
        eval_scaled(t, &mut m0);
        eval_scaled(t + 0.5 * h, &mut m1);
        eval_scaled(t + h, &mut m2);
        // One RK4 step of X' = M(s) X from the identity.
        let k1 = m0.clone();
        let k2 = &m1 * &(DMatrix::identity(dim, dim) + &k1 * (0.5 * h));
        let k3 = &m1 * &(DMatrix::identity(dim, dim) + &k2 * (0.5 * h));
        let k4 = &m2 * &(DMatrix::identity(dim, dim) + &k3 * h);
        let p = DMatrix::identity(dim, dim) + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(SdeError::InvalidArgument(format!(
                "propagator lost finiteness at t = {t}"
            )));
        }
        propagators.push(p);
        let mut f = DVector::<f64>::zeros(dim);
        sys.drift.eval_into(coeff_time(t), &zero, &mut f, &mut scratch);
        forcings.push(f * drift_scale);
        let mut g = DVector::<f64>::zeros(dim);
        sys.diffusion
            .eval_into(coeff_time(t), &zero, &mut g, &mut scratch);
        noises.push(g * noise_scale);
    }

    let n_rec = plan.n_recorded();
    let base = plan.base_index();
    let sqrt_dt = plan.dt.sqrt();
    let mut data = vec![0.0_f64; plan.n_paths * n_rec * dim];
    data.par_chunks_mut(n_rec * dim)
        .enumerate()
        .map(|(p, chunk)| {
            let mut x = x0.clone();
            let mut next = DVector::<f64>::zeros(dim);
            chunk[..dim].copy_from_slice(x.as_slice());
            for k in 0..plan.steps {
                let dw = sqrt_dt * gaussian_increment(plan.seed, p as u64, base + k as i64, 0);
                x.axpy(plan.dt, &forcings[k], 1.0);
                x.axpy(dw, &noises[k], 1.0);
                next.gemv(1.0, &propagators[k], &x, 0.0);
                std::mem::swap(&mut x, &mut next);
                if x.norm_squared() > DIVERGENCE_GUARD * DIVERGENCE_GUARD {
                    return Err(SdeError::Diverged {
                        path: p,
                        t: plan.t0 + (k + 1) as f64 * plan.dt,
                    });
                }
                if (k + 1) % plan.record_stride == 0 {
                    let slot = (k + 1) / plan.record_stride;
                    chunk[slot * dim..(slot + 1) * dim].copy_from_slice(x.as_slice());
                }
            }
            Ok(())
        })
        .collect::<Result<(), SdeError>>()?;
    Ok(PathEnsemble {
        equation,
        seed: plan.seed,
        times: plan.recorded_times(),
        dim,
        n_paths: plan.n_paths,
        data,
    })
}

/// How to draw from the averaged stationary law.
#[derive(Debug, Clone, Copy)]
pub enum StationaryMethod {
    /// Exact Gaussian sampling; needs state-independent averaged
    /// coefficients and a Hurwitz averaged operator.
    ExactGaussian,
    /// Integrate the averaged equation long enough to forget the start.
    LongRun { horizon: f64, dt: f64 },
}

fn gaussian_ingredients(
    avg: &AveragedSystem,
) -> Result<(DVector<f64>, DMatrix<f64>), SdeError> {
    if !avg.is_linear_additive() {
        return Err(SdeError::InvalidArgument(
            "exact sampling needs state-independent averaged coefficients".to_string(),
        ));
    }
    let d = avg.dim();
    let f = avg.f_bar.at(0.0, &DVector::zeros(d));
    let g = avg.g_bar.at(0.0, &DVector::zeros(d));
    let mean = avg
        .a_bar
        .clone()
        .lu()
        .solve(&(-&f))
        .ok_or_else(|| LinalgError::SolveFailed("averaged operator is singular".to_string()))?;
    let p = lyapunov_stationary_cov(&avg.a_bar, &DMatrix::from_column_slice(d, 1, g.as_slice()))?;
    Ok((mean, p))
}

/// Draw `n` independent samples of the averaged stationary law.
pub fn sample_averaged_stationary(
    avg: &AveragedSystem,
    method: StationaryMethod,
    n: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, SdeError> {
    if n == 0 {
        return Err(SdeError::InvalidArgument(
            "sample count must be positive".to_string(),
        ));
    }
    match method {
        StationaryMethod::ExactGaussian => {
            let (mean, p) = gaussian_ingredients(avg)?;
            let root = symmetric_sqrt(&p)?;
            let d = avg.dim();
            Ok((0..n)
                .map(|i| {
                    let z = DVector::from_iterator(
                        d,
                        (0..d).map(|c| gaussian_increment(seed, i as u64, -1, c as u64)),
                    );
                    &mean + &root * z
                })
                .collect())
        }
        StationaryMethod::LongRun { horizon, dt } => {
            let steps = (horizon / dt).ceil() as usize;
            if steps == 0 {
                return Err(SdeError::InvalidArgument(
                    "long-run horizon is shorter than the step".to_string(),
                ));
            }
            let plan = EmPlan {
                t0: 0.0,
                dt,
                steps,
                record_stride: steps,
                n_paths: n,
                seed,
            };
            let x0 = DVector::<f64>::zeros(avg.dim());
            let ens = simulate_averaged(avg, &plan, &x0)?;
            Ok(ens.marginal(ens.terminal_step()))
        }
    }
}

/// Exact discrete path of the stationary averaged Gaussian diffusion:
/// `X_{k+1} = m + e^{A dt}(X_k - m) + eta_k` with the lag-`dt` innovation
/// covariance, started from the stationary law itself.  No integrator
/// error enters; this is the reference object for autocovariance and
/// continuity checks.
pub fn exact_stationary_path(
    avg: &AveragedSystem,
    dt: f64,
    steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble, SdeError> {
    if !(dt.is_finite() && dt > 0.0) || n_paths == 0 {
        return Err(SdeError::InvalidArgument(
            "step and path count must be positive".to_string(),
        ));
    }
    let (mean, p) = gaussian_ingredients(avg)?;
    let d = avg.dim();
    let e = mat_exp(&avg.a_bar, dt)?;
    let innovation = &p - &e * &p * e.transpose();
    let root_innov = symmetric_sqrt(&innovation)?;
    let root_p = symmetric_sqrt(&p)?;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let mut data = vec![0.0_f64; n_paths * times.len() * d];
    data.par_chunks_mut(times.len() * d)
        .enumerate()
        .for_each(|(path, chunk)| {
            let z0 = DVector::from_iterator(
                d,
                (0..d).map(|c| gaussian_increment(seed, path as u64, -1, c as u64)),
            );
            let mut x = &mean + &root_p * z0;
            chunk[..d].copy_from_slice(x.as_slice());
            let mut centered = DVector::<f64>::zeros(d);
            for k in 0..steps {
                let z = DVector::from_iterator(
                    d,
                    (0..d).map(|c| gaussian_increment(seed, path as u64, k as i64, c as u64)),
                );
                centered.copy_from(&x);
                centered -= &mean;
                x.copy_from(&mean);
                x.gemv(1.0, &e, &centered, 1.0);
                x.gemv(1.0, &root_innov, &z, 1.0);
                chunk[(k + 1) * d..(k + 2) * d].copy_from_slice(x.as_slice());
            }
        });
    Ok(PathEnsemble {
        equation: Equation::Averaged,
        seed,
        times,
        dim: d,
        n_paths,
        data,
    })
}

/// Mean-square increment growth `E |X_{t+L dt} - X_t|^2` against the lag,
/// with a through-origin fit quantifying diffusive small-lag behavior.
#[derive(Debug, Clone)]
pub struct ContinuityReport {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub r_squared: f64,
}

pub fn continuity_modulus(
    ens: &PathEnsemble,
    max_lag: usize,
) -> Result<ContinuityReport, SdeError> {
    if max_lag < 4 {
        return Err(SdeError::InvalidArgument(
            "need at least four lags for a meaningful fit".to_string(),
        ));
    }
    if ens.n_times() <= max_lag {
        return Err(SdeError::InvalidArgument(
            "ensemble is shorter than the largest lag".to_string(),
        ));
    }
    let dts: Vec<f64> = ens.times.windows(2).map(|w| w[1] - w[0]).collect();
    let dt = dts[0];
    if dts.iter().any(|d| (d - dt).abs() > 1e-9) {
        return Err(SdeError::InvalidArgument(
            "continuity modulus needs a uniform grid".to_string(),
        ));
    }
    let mut points = Vec::with_capacity(max_lag);
    let mut per_path = vec![0.0; ens.n_paths];
    let mut anchors: Vec<f64> = Vec::new();
    for lag in 1..=max_lag {
        for (p, slot) in per_path.iter_mut().enumerate() {
            anchors.clear();
            for k in 0..ens.n_times() - lag {
                let a = ens.state(p, k);
                let b = ens.state(p, k + lag);
                anchors.push(
                    a.iter()
                        .zip(b.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>(),
                );
            }
            *slot = pairwise_mean(&anchors);
        }
        points.push((lag as f64 * dt, pairwise_mean(&per_path)));
    }
    let (slope, r_squared) = fit_through_origin(&points);
    Ok(ContinuityReport {
        points,
        slope,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::AveragedSystem;
    use crate::coefficients::tests::scalar_benchmark_system;
    use crate::coefficients::{
        CoefficientSystem, RecurrenceClass, TimeSignal, TimeVaryingOperator, VectorField,
    };

    fn plain_ou_system(eps0: f64) -> CoefficientSystem {
        // dX = a X dt + dW with a = -1, as a "time-dependent" system whose
        // coefficients happen to be constant.
        CoefficientSystem::new(
            TimeVaryingOperator::constant(DMatrix::from_row_slice(1, 1, &[-1.0])).unwrap(),
            VectorField::autonomous_offset(vec![TimeSignal::constant(0.0)]).unwrap(),
            VectorField::autonomous_offset(vec![TimeSignal::constant(1.0)]).unwrap(),
            RecurrenceClass::Stationary,
            eps0,
        )
        .unwrap()
    }

    fn averaged_ou() -> AveragedSystem {
        AveragedSystem::from_system(&plain_ou_system(1.0)).unwrap()
    }

    fn benchmark_certificate() -> DichotomyCertificate {
        DichotomyCertificate {
            n: 2.3,
            nu: 0.93,
            binding_separation: 2.9,
            sample_count: 0,
        }
    }

    #[test]
    fn increments_are_pure_functions_of_their_keys() {
        let a = gaussian_increment(7, 3, -25, 1);
        let b = gaussian_increment(7, 3, -25, 1);
        assert_eq!(a, b);
        assert_ne!(a, gaussian_increment(8, 3, -25, 1));
        assert_ne!(a, gaussian_increment(7, 4, -25, 1));
        assert_ne!(a, gaussian_increment(7, 3, -24, 1));
        assert_ne!(a, gaussian_increment(7, 3, -25, 0));
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|k| gaussian_increment(11, 0, k, 0)).collect();
        let mean = pairwise_mean(&draws);
        let var = pairwise_mean(&draws.iter().map(|z| z * z).collect::<Vec<_>>()) - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn ou_terminal_variance_matches_the_stationary_value() {
        let plan = EmPlan {
            t0: 0.0,
            dt: 0.01,
            steps: 2000,
            record_stride: 2000,
            n_paths: 4000,
            seed: 42,
        };
        let ens = simulate_averaged(&averaged_ou(), &plan, &DVector::zeros(1)).unwrap();
        let xs = ens.marginal_component(ens.terminal_step(), 0);
        let mean = pairwise_mean(&xs);
        let var = pairwise_mean(&xs.iter().map(|x| (x - mean) * (x - mean)).collect::<Vec<_>>());
        // Exact value 0.5 (1 - e^{-40}); allow 3 standard errors plus the
        // small positive Euler bias ~ dt/4.
        let want = 0.5 * (1.0 - (-40.0_f64).exp());
        let se = want * (2.0 / plan.n_paths as f64).sqrt();
        assert!(
            (var - want).abs() <= 3.0 * se + 0.01,
            "var {var} want {want}"
        );
        assert!(mean.abs() <= 3.0 * (want / plan.n_paths as f64).sqrt() + 1e-3);
    }

    #[test]
    fn unstable_drift_hits_the_divergence_guard() {
        let sys = CoefficientSystem::new(
            TimeVaryingOperator::constant(DMatrix::from_row_slice(1, 1, &[1.0])).unwrap(),
            VectorField::autonomous_offset(vec![TimeSignal::constant(0.0)]).unwrap(),
            VectorField::autonomous_offset(vec![TimeSignal::constant(0.0)]).unwrap(),
            RecurrenceClass::Stationary,
            1.0,
        )
        .unwrap();
        let avg = AveragedSystem::from_system(&sys).unwrap();
        let plan = EmPlan {
            t0: 0.0,
            dt: 0.1,
            steps: 400,
            record_stride: 400,
            n_paths: 2,
            seed: 1,
        };
        match simulate_averaged(&avg, &plan, &DVector::from_vec(vec![1.0])) {
            Err(SdeError::Diverged { t, .. }) => assert!(t > 0.0 && t <= 40.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let avg = averaged_ou();
        let plan = EmPlan {
            t0: 0.0,
            dt: 0.02,
            steps: 100,
            record_stride: 10,
            n_paths: 64,
            seed: 9,
        };
        let x0 = DVector::zeros(1);
        let wide = simulate_averaged(&avg, &plan, &x0).unwrap();
        let narrow = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_averaged(&avg, &plan, &x0).unwrap());
        assert_eq!(wide.data, narrow.data);
    }

    #[test]
    fn longer_burn_in_only_sharpens_the_same_coupled_path() {
        // Same seed and step: the two runs share increments on the common
        // window, so their gap at t = 0 is the contracted initial error
        // and keeps shrinking afterwards.
        let sys = scalar_benchmark_system();
        let cert = benchmark_certificate();
        let (short, meta) = bounded_solution(
            &sys,
            Equation::Rescaled { epsilon: 0.25 },
            &cert,
            1.8,
            5.0,
            0.025,
            8,
            200,
            77,
        )
        .unwrap();
        let doubled = DichotomyCertificate {
            n: cert.n * cert.n * BURN_IN_ATTENUATION,
            ..cert
        };
        // Doubling the attenuation target doubles the burn-in length.
        let (long, meta2) = bounded_solution(
            &sys,
            Equation::Rescaled { epsilon: 0.25 },
            &doubled,
            1.8,
            5.0,
            0.025,
            8,
            200,
            77,
        )
        .unwrap();
        assert!(meta2.duration > 1.9 * meta.duration);
        let start_gap = short.rms_deviation_from(&long, 0).unwrap();
        let end_gap = short
            .rms_deviation_from(&long, short.terminal_step())
            .unwrap();
        assert!(meta.bias_bound <= 0.02, "bias bound {}", meta.bias_bound);
        assert!(start_gap <= 0.05, "start gap {start_gap}");
        assert!(end_gap <= 0.2 * start_gap + 1e-12, "end gap {end_gap}");
    }

    #[test]
    fn euler_error_against_the_convolution_form_halves_with_the_step() {
        let sys = scalar_benchmark_system();
        let eq = Equation::Rescaled { epsilon: 0.25 };
        let x0 = DVector::from_vec(vec![0.3]);
        let gap = |dt: f64| {
            let steps = (5.0 / dt).round() as usize;
            let plan = EmPlan {
                t0: 0.0,
                dt,
                steps,
                record_stride: steps,
                n_paths: 256,
                seed: 5,
            };
            let em = simulate_system(&sys, eq, &plan, &x0).unwrap();
            let conv = stochastic_convolution(&sys, eq, &plan, &x0).unwrap();
            em.rms_deviation_from(&conv, em.terminal_step()).unwrap()
        };
        let coarse = gap(0.02);
        let fine = gap(0.01);
        let ratio = coarse / fine;
        assert!(
            (1.5..=3.0).contains(&ratio),
            "gap ratio {ratio} (coarse {coarse}, fine {fine})"
        );
    }

    #[test]
    fn convolution_reproduces_the_ou_variance() {
        let sys = plain_ou_system(1.0);
        let eq = Equation::Rescaled { epsilon: 1.0 };
        let plan = EmPlan {
            t0: 0.0,
            dt: 0.01,
            steps: 300,
            record_stride: 300,
            n_paths: 5000,
            seed: 21,
        };
        let ens = stochastic_convolution(&sys, eq, &plan, &DVector::zeros(1)).unwrap();
        let xs = ens.marginal_component(ens.terminal_step(), 0);
        let mean = pairwise_mean(&xs);
        let var = pairwise_mean(&xs.iter().map(|x| (x - mean) * (x - mean)).collect::<Vec<_>>());
        let want = 0.5 * (1.0 - (-6.0_f64).exp());
        let se = want * (2.0 / plan.n_paths as f64).sqrt();
        assert!(
            (var - want).abs() <= 3.0 * se + 0.01,
            "var {var} want {want}"
        );
    }

    #[test]
    fn convolution_matches_its_discrete_closed_form() {
        // For X' = -X + c the recursion telescopes to the geometric sum
        // X_N = p^N x0 + c h p (1 - p^N) / (1 - p) with p = e^{-h}; only
        // the O(h^5) one-step propagator error remains.
        let c = 0.7;
        let sys = CoefficientSystem::new(
            TimeVaryingOperator::constant(DMatrix::from_row_slice(1, 1, &[-1.0])).unwrap(),
            VectorField::autonomous_offset(vec![TimeSignal::constant(c)]).unwrap(),
            VectorField::autonomous_offset(vec![TimeSignal::constant(0.0)]).unwrap(),
            RecurrenceClass::Stationary,
            1.0,
        )
        .unwrap();
        let (h, steps) = (0.01, 500);
        let plan = EmPlan {
            t0: 0.0,
            dt: h,
            steps,
            record_stride: steps,
            n_paths: 1,
            seed: 0,
        };
        let x0 = -0.2;
        let ens = stochastic_convolution(
            &sys,
            Equation::Rescaled { epsilon: 1.0 },
            &plan,
            &DVector::from_vec(vec![x0]),
        )
        .unwrap();
        let got = ens.state(0, ens.terminal_step())[0];
        let p = (-h).exp();
        let pn = p.powi(steps as i32);
        let want = pn * x0 + c * h * p * (1.0 - pn) / (1.0 - p);
        assert!((got - want).abs() <= 1e-9, "got {got} want {want}");
    }

    #[test]
    fn forced_oscillation_amplitude_is_near_the_stationary_response() {
        // X' = -X + cos(t/eps) settles on an oscillation of amplitude
        // 1/sqrt(1 + eps^{-2}); the left-endpoint forcing rule biases the
        // result by O(dt/eps).
        let eps: f64 = 0.25;
        let sys = CoefficientSystem::new(
            TimeVaryingOperator::constant(DMatrix::from_row_slice(1, 1, &[-1.0])).unwrap(),
            VectorField::autonomous_offset(vec![TimeSignal::cosine(1.0, 1.0)]).unwrap(),
            VectorField::autonomous_offset(vec![TimeSignal::constant(0.0)]).unwrap(),
            RecurrenceClass::Periodic {
                period: std::f64::consts::TAU,
            },
            1.0,
        )
        .unwrap();
        let amplitude = 1.0 / (1.0 + eps.powi(-2)).sqrt();
        // The stationary oscillation passes through amplitude^2 at t = 0;
        // starting there avoids a transient.
        let x0 = DVector::from_vec(vec![amplitude * amplitude]);
        let steps = 256;
        let plan = EmPlan {
            t0: 0.0,
            dt: std::f64::consts::TAU * eps / steps as f64,
            steps,
            record_stride: 1,
            n_paths: 1,
            seed: 0,
        };
        let ens =
            stochastic_convolution(&sys, Equation::Rescaled { epsilon: eps }, &plan, &x0).unwrap();
        let samples: Vec<f64> = (0..ens.n_times()).map(|k| ens.state(0, k)[0].abs()).collect();
        let peak = crate::numerics::parabolic_peak(&samples);
        assert!(
            (peak - amplitude).abs() <= 0.02 * amplitude,
            "peak {peak} amplitude {amplitude}"
        );
    }

    #[test]
    fn state_dependent_coefficients_are_refused_by_the_convolution_form() {
        let sys = scalar_benchmark_system();
        // The benchmark has a time-varying operator but state-independent
        // F and G, so build a state-dependent G variant.
        let g = VectorField::new(
            vec![TimeSignal::constant(0.0)],
            Some(TimeVaryingOperator::constant(DMatrix::from_row_slice(1, 1, &[1.0])).unwrap()),
            Vec::new(),
            0.0,
            1.0,
        )
        .unwrap();
        let bad = CoefficientSystem::new(
            sys.operator.clone(),
            sys.drift.clone(),
            g,
            RecurrenceClass::Stationary,
            0.25,
        )
        .unwrap();
        let plan = EmPlan {
            t0: 0.0,
            dt: 0.02,
            steps: 10,
            record_stride: 10,
            n_paths: 1,
            seed: 0,
        };
        assert!(matches!(
            stochastic_convolution(
                &bad,
                Equation::Rescaled { epsilon: 0.25 },
                &plan,
                &DVector::zeros(1)
            ),
            Err(SdeError::InvalidArgument(_))
        ));
    }

    #[test]
    fn clock_changes_are_exact_bookkeeping() {
        let sys = plain_ou_system(0.5);
        let plan = EmPlan {
            t0: 0.0,
            dt: 0.05,
            steps: 40,
            record_stride: 20,
            n_paths: 3,
            seed: 4,
        };
        let eps = 0.5;
        let orig = simulate_system(
            &sys,
            Equation::Original { epsilon: eps },
            &plan,
            &DVector::zeros(1),
        )
        .unwrap();
        let data_before = orig.data.clone();
        let moved = orig.to_rescaled_clock().unwrap();
        assert_eq!(moved.equation, Equation::Rescaled { epsilon: eps });
        assert_eq!(moved.times()[2], eps * 2.0 * 20.0 * 0.05);
        assert_eq!(moved.data, data_before);
        let back = moved.to_original_clock().unwrap();
        assert!((back.times()[2] - 2.0).abs() <= 1e-15);
        let avg_plan = EmPlan {
            record_stride: 40,
            ..plan
        };
        let averaged = simulate_averaged(&averaged_ou(), &avg_plan, &DVector::zeros(1)).unwrap();
        assert!(averaged.to_rescaled_clock().is_err());
    }

    #[test]
    fn csv_rendering_is_stable() {
        let ens = PathEnsemble {
            equation: Equation::Averaged,
            seed: 3,
            times: vec![0.0, 0.5],
            dim: 2,
            n_paths: 1,
            data: vec![1.0, -2.0, 0.25, 3.0],
        };
        let mut out = Vec::new();
        ens.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "path_id,t,x_1,x_2\n\
             0,0.000000000000e0,1.000000000000e0,-2.000000000000e0\n\
             0,5.000000000000e-1,2.500000000000e-1,3.000000000000e0\n"
        );
    }

    #[test]
    fn binary_dump_round_trips_bit_exactly() {
        let plan = EmPlan {
            t0: -0.2,
            dt: 0.02,
            steps: 12,
            record_stride: 4,
            n_paths: 5,
            seed: 99,
        };
        let ens = simulate_system(
            &scalar_benchmark_system(),
            Equation::Rescaled { epsilon: 0.25 },
            &plan,
            &DVector::zeros(1),
        )
        .unwrap();
        let mut bytes = Vec::new();
        ens.write_binary(&mut bytes).unwrap();
        let back = PathEnsemble::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(ens, back);
        let mut garbled = bytes.clone();
        garbled[0] ^= 0xff;
        assert!(matches!(
            PathEnsemble::read_binary(garbled.as_slice()),
            Err(SdeError::Format(_))
        ));
    }

    #[test]
    fn exact_stationary_sampler_matches_mean_and_covariance() {
        // dX = diag(-1, -3) X dt + (1, 1) dW + constant forcing (1, 0).
        let sys = CoefficientSystem::new(
            TimeVaryingOperator::constant(DMatrix::from_row_slice(
                2,
                2,
                &[-1.0, 0.0, 0.0, -3.0],
            ))
            .unwrap(),
            VectorField::autonomous_offset(vec![
                TimeSignal::constant(1.0),
                TimeSignal::constant(0.0),
            ])
            .unwrap(),
            VectorField::autonomous_offset(vec![
                TimeSignal::constant(1.0),
                TimeSignal::constant(1.0),
            ])
            .unwrap(),
            RecurrenceClass::Stationary,
            1.0,
        )
        .unwrap();
        let avg = AveragedSystem::from_system(&sys).unwrap();
        let samples =
            sample_averaged_stationary(&avg, StationaryMethod::ExactGaussian, 20_000, 13).unwrap();
        let n = samples.len() as f64;
        let mean = samples.iter().fold(DVector::zeros(2), |acc, s| acc + s) / n;
        assert!((mean[0] - 1.0).abs() <= 0.02, "mean {mean}");
        assert!(mean[1].abs() <= 0.02);
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for s in &samples {
            let c = s - &mean;
            cov += &c * c.transpose();
        }
        cov /= n;
        let want = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 1.0 / 6.0]);
        assert!((cov - want).norm() <= 0.02, "covariance error");
    }

    #[test]
    fn exact_path_has_the_right_lag_autocovariance_and_continuity() {
        let avg = averaged_ou();
        let ens = exact_stationary_path(&avg, 0.05, 400, 400, 31).unwrap();
        // Lag-k autocovariance of the stationary scalar diffusion is
        // 0.5 e^{-k dt}.
        let mut prods = Vec::new();
        for p in 0..ens.n_paths() {
            for k in 0..ens.n_times() - 20 {
                prods.push(ens.state(p, k)[0] * ens.state(p, k + 20)[0]);
            }
        }
        let got = pairwise_mean(&prods);
        let want = 0.5 * (-1.0_f64).exp();
        assert!((got - want).abs() <= 0.01, "autocov {got} want {want}");
        let report = continuity_modulus(&ens, 5).unwrap();
        // E|X_{t+h} - X_t|^2 = 1 - e^{-h} is close to linear in h at
        // these lags.
        assert!(
            report.slope > 0.8 && report.slope < 1.05,
            "slope {}",
            report.slope
        );
        assert!(report.r_squared >= 0.95, "r^2 {}", report.r_squared);
    }

    #[test]
    fn plans_reject_misaligned_and_oversized_steps() {
        let avg = averaged_ou();
        let x0 = DVector::zeros(1);
        let misaligned = EmPlan {
            t0: 0.013,
            dt: 0.05,
            steps: 10,
            record_stride: 10,
            n_paths: 1,
            seed: 0,
        };
        assert!(matches!(
            simulate_averaged(&avg, &misaligned, &x0),
            Err(SdeError::InvalidArgument(_))
        ));
        let coarse = EmPlan {
            t0: 0.0,
            dt: 0.2,
            steps: 10,
            record_stride: 10,
            n_paths: 1,
            seed: 0,
        };
        assert!(matches!(
            simulate_averaged(&avg, &coarse, &x0),
            Err(SdeError::StepTooCoarse { .. })
        ));
        let sys = scalar_benchmark_system();
        let plan = EmPlan {
            t0: 0.0,
            dt: 0.02,
            steps: 10,
            record_stride: 10,
            n_paths: 1,
            seed: 0,
        };
        // eps above the admissible ceiling of the system is refused.
        assert!(matches!(
            simulate_system(&sys, Equation::Rescaled { epsilon: 0.5 }, &plan, &x0),
            Err(SdeError::InvalidArgument(_))
        ));
    }

    #[test]
    fn coupled_runs_share_increments_and_stay_close_for_small_eps() {
        let sys = scalar_benchmark_system();
        let avg = AveragedSystem::from_system(&sys).unwrap();
        let cert = benchmark_certificate();
        let run = coupled_deviation(&sys, &avg, 0.1, &cert, 4.0, 0.01, 25, 400, 51).unwrap();
        let stats = run.statistics().unwrap();
        assert_eq!(stats.times.len(), run.rescaled.n_times());
        // With g = g_bar = 1 the noise cancels exactly in the difference,
        // so the deviation is a small deterministic quantity.
        assert!(
            stats.sup_rms_deviation <= 0.2,
            "sup deviation {}",
            stats.sup_rms_deviation
        );
        assert!(stats.sup_rms_deviation > 0.0);
        let run_finer = coupled_deviation(&sys, &avg, 0.025, &cert, 4.0, 0.0025, 100, 400, 51)
            .unwrap();
        let stats_finer = run_finer.statistics().unwrap();
        assert!(
            stats_finer.sup_rms_deviation < stats.sup_rms_deviation,
            "deviation should shrink with eps: {} vs {}",
            stats_finer.sup_rms_deviation,
            stats.sup_rms_deviation
        );
    }
}
