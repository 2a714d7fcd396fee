//! End-to-end acceptance gate for the averaging toolkit.
//!
//! Each test exercises one headline guarantee on the shipped benchmark
//! systems and prints a single `acceptance: <name>: PASS (...)` line with
//! the measured numbers (visible under `--nocapture`; the test harness
//! itself provides the pass/fail verdict per line).  Every tolerance is
//! pinned as a named constant below.  Monte Carlo checks use fixed seeds,
//! so a pass is reproducible, and statistical comparisons carry explicit
//! standard errors instead of fudge factors.

use std::f64::consts::{E, SQRT_2, TAU};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use bogolyubov::averaging::{verify_contraction, AveragedSystem};
use bogolyubov::coefficients::{
    CoefficientSystem, MatrixHarmonic, NonlinearTerm, RecurrenceClass, Saturation, TimeSignal,
    TimeVaryingOperator, VectorField,
};
use bogolyubov::flow::{fit_dichotomy, rescaled_gap, DichotomyCertificate, DichotomyPlan};
use bogolyubov::metrics::{
    beta_exact, comparability_probe, law_convergence_sweep, noise_floor, BetaProbe, EmpiricalLaw,
};
use bogolyubov::scenario::{RECORD_INTERVAL, STEP_FACTOR};
use bogolyubov::sde::{
    bounded_solution, continuity_modulus, coupled_deviation, exact_stationary_path, CoupledRun,
    Equation,
};

/// Time scales swept by the flow-gap and dichotomy-transfer checks.
const GAP_EPSILONS: [f64; 4] = [0.2, 0.1, 0.05, 0.02];
/// Time scales swept by the Monte Carlo convergence checks.
const SWEEP_EPSILONS: [f64; 3] = [0.2, 0.1, 0.05];
/// Exponential weight used when comparing the compressed flow with the
/// averaged one: half the averaged decay rate.
const GAMMA0: f64 = 0.5;
/// The flow gap at the finest time scale must undercut this fraction of
/// the gap at the coarsest.
const GAP_RATIO_MAX: f64 = 0.15;
/// Relative slack on the closed-form flow-gap envelope.
const GAP_ENVELOPE_SLACK: f64 = 1e-3;
/// Fitted decay rates on the compressed clock must stay above this.
const NU_MIN: f64 = 0.9;
/// Fitted prefactors must stay below `e` times this slack.
const N_SLACK: f64 = 1.05;
/// Absolute tolerance for the oscillatory-convolution amplitude.
const CONVOLUTION_TOL: f64 = 1e-6;
/// Statistical comparisons accept up to this many standard errors.
const SIGMA_RULE: f64 = 3.0;
/// A law distance counts as "at the resampling floor" below this multiple
/// of the floor.
const REACH_FACTOR: f64 = 2.5;
/// Minimum through-origin fit quality for the stationary increments.
const R_SQUARED_MIN: f64 = 0.95;
/// Absolute tolerance for the two-point closed form.
const TWO_POINT_TOL: f64 = 1e-3;
/// Numerical slack on metric axioms of the exact solver.
const AXIOM_TOL: f64 = 1e-9;
/// Random law triples checked for the metric axioms.
const TRIPLE_COUNT: usize = 100;

/// Recording horizon of every Monte Carlo run, in the compressed clock.
const HORIZON: f64 = 3.0;
/// Probe grid for law comparisons, matching the shipped scenario.
const PROBE_TIMES: [f64; 2] = [1.0, 3.0];
/// Paths for the mean-square deviation sweep.
const DEVIATION_PATHS: usize = 2000;
/// Samples per law for the distributional sweep.
const LAW_PATHS: usize = 10_000;
/// Paths for the radius and recurrence checks.
const RADIUS_PATHS: usize = 2000;
const PERIOD_PATHS: usize = 4000;
/// Paths for the exact stationary sampler checks.
const STATIONARY_PATHS: usize = 10_000;

const SHARED_SEED: u64 = 41_005;

fn report(name: &str, pass: bool, details: &str) {
    println!(
        "acceptance: {name}: {} ({details})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name}: {details}");
}

/// Scalar benchmark: `a(t) = -1 + 0.5 cos t`, `f(t) = cos(sqrt(2) t)`,
/// unit additive noise.
fn scalar_benchmark() -> CoefficientSystem {
    let operator = TimeVaryingOperator::new(
        DMatrix::from_row_slice(1, 1, &[-1.0]),
        vec![MatrixHarmonic {
            freq: 1.0,
            cos: DMatrix::from_row_slice(1, 1, &[0.5]),
            sin: DMatrix::zeros(1, 1),
        }],
        None,
    )
    .unwrap();
    let drift = VectorField::autonomous_offset(vec![TimeSignal::cosine(SQRT_2, 1.0)]).unwrap();
    let diffusion = VectorField::autonomous_offset(vec![TimeSignal::constant(1.0)]).unwrap();
    CoefficientSystem::new(
        operator,
        drift,
        diffusion,
        RecurrenceClass::QuasiPeriodic {
            frequencies: vec![1.0, SQRT_2],
        },
        0.25,
    )
    .unwrap()
}

/// Same operator and noise, but a 2 pi periodic drift.
fn periodic_benchmark() -> CoefficientSystem {
    let sys = scalar_benchmark();
    let drift = VectorField::autonomous_offset(vec![TimeSignal::cosine(1.0, 1.0)]).unwrap();
    CoefficientSystem::new(
        sys.operator,
        drift,
        sys.diffusion,
        RecurrenceClass::Periodic { period: TAU },
        0.25,
    )
    .unwrap()
}

/// Planar benchmark: Hurwitz base with quasi-periodic harmonics, saturated
/// drift and diffusion nonlinearities with explicit certificates.
fn planar_benchmark() -> CoefficientSystem {
    let operator = TimeVaryingOperator::new(
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, 0.0, -1.5]),
        vec![
            MatrixHarmonic {
                freq: 1.0,
                cos: DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.0]),
                sin: DMatrix::zeros(2, 2),
            },
            MatrixHarmonic {
                freq: SQRT_2,
                cos: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.3]),
                sin: DMatrix::zeros(2, 2),
            },
        ],
        None,
    )
    .unwrap();
    let drift = VectorField::new(
        vec![TimeSignal::cosine(1.0, 0.3), TimeSignal::cosine(SQRT_2, 0.3)],
        None,
        vec![NonlinearTerm {
            amplitude: 0.1,
            time: TimeSignal::constant(1.0),
            saturation: Saturation::Tanh,
        }],
        0.43,
        0.1,
    )
    .unwrap();
    let diffusion = VectorField::new(
        vec![TimeSignal::constant(0.2), TimeSignal::constant(0.1)],
        None,
        vec![NonlinearTerm {
            amplitude: 0.1,
            time: TimeSignal::constant(1.0),
            saturation: Saturation::BoundedQuadratic,
        }],
        0.23,
        0.1,
    )
    .unwrap();
    CoefficientSystem::new(
        operator,
        drift,
        diffusion,
        RecurrenceClass::QuasiPeriodic {
            frequencies: vec![1.0, SQRT_2],
        },
        0.25,
    )
    .unwrap()
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Coupled runs of the scalar benchmark shared by the deviation and
/// comparability checks: one Brownian motion drives both equations.
fn shared_runs() -> &'static Vec<(f64, CoupledRun)> {
    static RUNS: OnceLock<Vec<(f64, CoupledRun)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let sys = scalar_benchmark();
        let avg = AveragedSystem::from_system(&sys).unwrap();
        let cert = fit_dichotomy(&sys.operator, &DichotomyPlan::default()).unwrap();
        SWEEP_EPSILONS
            .iter()
            .map(|&eps| {
                let dt = STEP_FACTOR * eps;
                let stride = (RECORD_INTERVAL / dt).round() as usize;
                let run = coupled_deviation(
                    &sys,
                    &avg,
                    eps,
                    &cert,
                    HORIZON,
                    dt,
                    stride,
                    DEVIATION_PATHS,
                    SHARED_SEED,
                )
                .unwrap();
                (eps, run)
            })
            .collect()
    })
}

#[test]
fn averaged_flow_gap_shrinks_linearly_with_the_time_scale() {
    let sys = scalar_benchmark();
    let avg = AveragedSystem::from_system(&sys).unwrap();
    let gaps: Vec<f64> = GAP_EPSILONS
        .iter()
        .map(|&eps| {
            rescaled_gap(&sys.operator, &avg.a_bar, eps, GAMMA0)
                .unwrap()
                .n_eps
        })
        .collect();
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let ratio = gaps[GAP_EPSILONS.len() - 1] / gaps[0];
    // Closed-form envelope of the weighted gap for this operator: the
    // oscillation contributes at most e^{eps} - 1 to the propagator
    // ratio, and the weight never exceeds e^{gamma0 / gamma0} = e^{1}
    // worth of slack spread as e^{0.5}.
    let enveloped = GAP_EPSILONS
        .iter()
        .zip(gaps.iter())
        .all(|(&eps, &g)| g <= GAMMA0.exp() * (eps.exp() - 1.0) * (1.0 + GAP_ENVELOPE_SLACK));
    report(
        "averaged flow gap",
        decreasing && ratio <= GAP_RATIO_MAX && enveloped,
        &format!(
            "gaps = {gaps:.4?}, fine/coarse ratio {ratio:.3} <= {GAP_RATIO_MAX}, \
             envelope e^{{0.5}}(e^eps - 1) honored: {enveloped}"
        ),
    );
}

#[test]
fn dichotomy_constants_transfer_to_the_compressed_clock() {
    let mut fitted: Vec<(f64, DichotomyCertificate)> = Vec::new();
    for &eps in &GAP_EPSILONS {
        // The compressed operator oscillates at frequency 1/eps, so the
        // propagator sweeps need a step that resolves it.
        let op = TimeVaryingOperator::new(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            vec![MatrixHarmonic {
                freq: 1.0 / eps,
                cos: DMatrix::from_row_slice(1, 1, &[0.5]),
                sin: DMatrix::zeros(1, 1),
            }],
            None,
        )
        .unwrap();
        let plan = DichotomyPlan {
            step: (eps / 8.0).min(1e-2),
            ..DichotomyPlan::default()
        };
        fitted.push((eps, fit_dichotomy(&op, &plan).unwrap()));
    }
    let ok = fitted
        .iter()
        .all(|(_, c)| c.nu >= NU_MIN && c.n <= E * N_SLACK);
    let rendered: Vec<String> = fitted
        .iter()
        .map(|(eps, c)| format!("eps {eps}: n = {:.3}, nu = {:.3}", c.n, c.nu))
        .collect();
    report(
        "dichotomy transfer",
        ok,
        &format!(
            "{}; need nu >= {NU_MIN} and n <= e * {N_SLACK}",
            rendered.join("; ")
        ),
    );
}

fn rk4_step(f: &impl Fn(f64, f64) -> f64, t: f64, x: f64, h: f64) -> f64 {
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
    let k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
    let k4 = f(t + h, x + h * k3);
    x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Stationary amplitude of `x' = -nu x + cos(t / eps)`, found by
/// integrating through the transient and refining the gridded peak with a
/// parabola.  Independent of the library quadrature.
fn forced_response_peak(nu: f64, eps: f64) -> f64 {
    let h = (eps / 64.0).min(1e-3);
    let deriv = |t: f64, x: f64| -nu * x + (t / eps).cos();
    let mut x = 0.0_f64;
    let mut t = 0.0_f64;
    for _ in 0..(20.0 / nu / h).ceil() as usize {
        x = rk4_step(&deriv, t, x, h);
        t += h;
    }
    let scan_steps = (1.25 * TAU * eps / h).ceil() as usize;
    let mut vals = Vec::with_capacity(scan_steps + 1);
    vals.push(x.abs());
    for _ in 0..scan_steps {
        x = rk4_step(&deriv, t, x, h);
        t += h;
        vals.push(x.abs());
    }
    let (i, &peak) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    if i == 0 || i + 1 == vals.len() {
        return peak;
    }
    let (y1, y2, y3) = (vals[i - 1], vals[i], vals[i + 1]);
    let denom = y1 - 2.0 * y2 + y3;
    if denom.abs() < 1e-300 {
        return y2;
    }
    y2 - (y3 - y1) * (y3 - y1) / (8.0 * denom)
}

#[test]
fn oscillatory_convolution_peak_matches_the_analytic_amplitude() {
    let nu = 1.0;
    let mut details = Vec::new();
    let mut ok = true;
    for &eps in &[0.1, 0.01] {
        let measured = forced_response_peak(nu, eps);
        let exact = 1.0 / (nu * nu + 1.0 / (eps * eps)).sqrt();
        let err = (measured - exact).abs();
        ok &= err <= CONVOLUTION_TOL;
        details.push(format!("eps {eps}: |{measured:.8} - {exact:.8}| = {err:.2e}"));
    }
    report(
        "oscillatory convolution peak",
        ok,
        &format!("{}; tolerance {CONVOLUTION_TOL:.0e}", details.join("; ")),
    );
}

#[test]
fn exact_stationary_sampler_reproduces_variance_and_autocovariance() {
    let sys = scalar_benchmark();
    let avg = AveragedSystem::from_system(&sys).unwrap();
    let delta = 0.5;
    let ens = exact_stationary_path(&avg, delta, 2, STATIONARY_PATHS, 41_004).unwrap();
    let a: Vec<f64> = ens.marginal_component(1, 0);
    let b: Vec<f64> = ens.marginal_component(2, 0);
    let (mean_a, _) = mean_and_se(&a);
    let (mean_b, _) = mean_and_se(&b);
    let sq: Vec<f64> = a.iter().map(|x| (x - mean_a) * (x - mean_a)).collect();
    let (var, var_se) = mean_and_se(&sq);
    let prod: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - mean_a) * (y - mean_b))
        .collect();
    let (cov, cov_se) = mean_and_se(&prod);
    let var_exact = 0.5;
    let cov_exact = 0.5 * (-delta).exp();
    let var_ok = (var - var_exact).abs() <= SIGMA_RULE * var_se;
    let cov_ok = (cov - cov_exact).abs() <= SIGMA_RULE * cov_se;
    report(
        "exact stationary law",
        var_ok && cov_ok,
        &format!(
            "variance {var:.4} vs {var_exact} (se {var_se:.4}), \
             lag-{delta} autocovariance {cov:.4} vs {cov_exact:.4} (se {cov_se:.4}), \
             {STATIONARY_PATHS} paths"
        ),
    );
}

/// Exact second moments of the coupled Euler chains for the scalar
/// benchmark: the compressed state `X` and the averaged state `Y` share
/// every increment, so the difference `Z = X - Y` is driftless noise-free
/// and its moments close under a five-term linear recursion.
fn coupled_moment_oracle(
    eps: f64,
    dt: f64,
    n_burn: usize,
    n_recorded: usize,
    stride: usize,
) -> Vec<f64> {
    let t0 = -(n_burn as f64) * dt;
    let total = n_burn + (n_recorded - 1) * stride;
    let gamma = 1.0 - dt;
    let (mut mu_y, mut mu_z) = (0.0_f64, 0.0_f64);
    let (mut m_yy, mut m_zy, mut m_zz) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut recorded = Vec::with_capacity(n_recorded);
    for k in 0..=total {
        if k >= n_burn && (k - n_burn) % stride == 0 {
            recorded.push(m_zz);
        }
        if k == total {
            break;
        }
        let s = (t0 + k as f64 * dt) / eps;
        let a = -1.0 + 0.5 * s.cos();
        let f = (SQRT_2 * s).cos();
        let alpha = 1.0 + a * dt;
        let b = (a + 1.0) * dt;
        let c = f * dt;
        let next_zz = alpha * alpha * m_zz
            + b * b * m_yy
            + c * c
            + 2.0 * alpha * b * m_zy
            + 2.0 * alpha * c * mu_z
            + 2.0 * b * c * mu_y;
        let next_zy = alpha * gamma * m_zy + b * gamma * m_yy + c * gamma * mu_y;
        let next_yy = gamma * gamma * m_yy + dt;
        let next_mu_z = alpha * mu_z + b * mu_y + c;
        mu_y *= gamma;
        mu_z = next_mu_z;
        m_yy = next_yy;
        m_zy = next_zy;
        m_zz = next_zz;
    }
    recorded
}

#[test]
fn mean_square_deviation_tracks_the_moment_recursion_and_shrinks() {
    let mut sup_values = Vec::new();
    let mut details = Vec::new();
    let mut ok = true;
    for (eps, run) in shared_runs() {
        let dt = STEP_FACTOR * eps;
        let stride = (RECORD_INTERVAL / dt).round() as usize;
        let n_burn = (run.burn_in.duration / dt).round() as usize;
        let n_recorded = run.rescaled.n_times();
        let oracle = coupled_moment_oracle(*eps, dt, n_burn, n_recorded, stride);
        assert_eq!(oracle.len(), n_recorded);
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 0..n_recorded {
            let samples = run
                .rescaled
                .squared_deviations_from(&run.averaged, k)
                .unwrap();
            let (mean, _) = mean_and_se(&samples);
            if mean > best.1 {
                best = (k, mean);
            }
        }
        let samples = run
            .rescaled
            .squared_deviations_from(&run.averaged, best.0)
            .unwrap();
        let (sup_mc, se) = mean_and_se(&samples);
        let sup_oracle = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let within = (sup_mc - sup_oracle).abs() <= SIGMA_RULE * se;
        ok &= within;
        sup_values.push(sup_mc);
        details.push(format!(
            "eps {eps}: D = {sup_mc:.5} vs recursion {sup_oracle:.5} (se {se:.5})"
        ));
    }
    let decreasing = sup_values.windows(2).all(|w| w[1] < w[0]);
    report(
        "mean-square deviation",
        ok && decreasing,
        &format!(
            "{}; strictly decreasing: {decreasing}, {DEVIATION_PATHS} shared-noise paths",
            details.join("; ")
        ),
    );
}

#[test]
fn law_distance_sweep_reaches_the_resampling_floor() {
    let sys = scalar_benchmark();
    let avg = AveragedSystem::from_system(&sys).unwrap();
    let cert = fit_dichotomy(&sys.operator, &DichotomyPlan::default()).unwrap();
    let probe = BetaProbe {
        directions: 8,
        shuffles: 5,
        seed: 41_006,
    };
    let sweep = law_convergence_sweep(
        &sys,
        &avg,
        &cert,
        &SWEEP_EPSILONS,
        &PROBE_TIMES,
        LAW_PATHS,
        &probe,
    )
    .unwrap();
    // The column entry per time scale is the sup over the probe grid,
    // with the floor of the row attaining it.
    let column: Vec<(f64, f64, f64)> = SWEEP_EPSILONS
        .iter()
        .map(|&eps| {
            let row = sweep
                .rows
                .iter()
                .filter(|r| r.epsilon == eps)
                .max_by(|a, b| a.beta.total_cmp(&b.beta))
                .unwrap();
            (eps, row.beta, row.noise_floor)
        })
        .collect();
    let decreasing = column.windows(2).all(|w| w[1].1 < w[0].1);
    let above_at_coarse = column[0].1 > column[0].2;
    let (_, fine_beta, fine_floor) = column[column.len() - 1];
    let reached = fine_beta <= REACH_FACTOR * fine_floor;
    let rendered: Vec<String> = column
        .iter()
        .map(|(e, b, f)| format!("eps {e}: sup beta {b:.4} (floor {f:.4})"))
        .collect();
    report(
        "law distance sweep",
        decreasing && above_at_coarse && reached,
        &format!(
            "{}; independent draws over t in {PROBE_TIMES:?}, strictly decreasing: \
             {decreasing}, reach factor {REACH_FACTOR}, {LAW_PATHS} samples per law",
            rendered.join("; ")
        ),
    );
}

#[test]
fn bounded_solutions_respect_the_certified_radius() {
    let eps = 0.1;
    let dt = STEP_FACTOR * eps;
    let stride = (RECORD_INTERVAL / dt).round() as usize;
    let mut details = Vec::new();
    let mut ok = true;
    for (label, sys) in [
        ("scalar", scalar_benchmark()),
        ("planar", planar_benchmark()),
    ] {
        let cert = fit_dichotomy(&sys.operator, &DichotomyPlan::default()).unwrap();
        let bound = sys
            .drift
            .bound_certificate()
            .max(sys.diffusion.bound_certificate());
        let lipschitz = sys
            .drift
            .lipschitz_certificate()
            .max(sys.diffusion.lipschitz_certificate());
        let contraction = verify_contraction(cert.n, cert.nu, bound, lipschitz);
        let radius = contraction
            .radius
            .expect("both benchmarks satisfy the contraction hypotheses");
        let (ens, burn_in) = bounded_solution(
            &sys,
            Equation::Rescaled { epsilon: eps },
            &cert,
            radius,
            HORIZON,
            dt,
            stride,
            RADIUS_PATHS,
            41_007,
        )
        .unwrap();
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 0..ens.n_times() {
            let m = ens.mean_square_norm(k);
            if m > best.1 {
                best = (k, m);
            }
        }
        let (sup_ms, se) = mean_and_se(&ens.squared_norms(best.0));
        // The burn-in leaves a residual initial-condition bias of at most
        // `b` in the state, inflating the squared norm by at most
        // 2 r b + b^2 inside the radius-r ball.
        let b = burn_in.bias_bound;
        let budget = radius * radius + SIGMA_RULE * se + 2.0 * radius * b + b * b;
        let within = sup_ms <= budget;
        ok &= within;
        details.push(format!(
            "{label}: sup E|x|^2 = {sup_ms:.4} <= {budget:.4} (r = {radius:.3}, \
             bias {b:.2e}, se {se:.4})"
        ));
    }
    report(
        "certified radius",
        ok,
        &format!("{}; {RADIUS_PATHS} paths", details.join("; ")),
    );
}

#[test]
fn stationary_increments_grow_linearly_in_the_lag() {
    let sys = scalar_benchmark();
    let avg = AveragedSystem::from_system(&sys).unwrap();
    let ens = exact_stationary_path(&avg, 0.01, 130, 2000, 41_008).unwrap();
    let fit = continuity_modulus(&ens, 10).unwrap();
    let ok = fit.r_squared >= R_SQUARED_MIN;
    report(
        "continuity modulus",
        ok,
        &format!(
            "lags 0.01..0.10, slope {:.3}, r^2 {:.4} >= {R_SQUARED_MIN}",
            fit.slope, fit.r_squared
        ),
    );
}

#[test]
fn solution_laws_inherit_the_recurrence_of_the_coefficients() {
    // Periodic coefficients: the bounded-solution law repeats after one
    // compressed period 2 pi eps, checked against the resampling floor on
    // a grid aligned so the lag is exactly six recorded intervals.
    let eps = 0.1;
    let period = TAU * eps;
    let lag_slots = 6usize;
    let steps_per_period = 126usize;
    let dt = period / steps_per_period as f64;
    let stride = steps_per_period / lag_slots;
    let sys = periodic_benchmark();
    let cert = fit_dichotomy(&sys.operator, &DichotomyPlan::default()).unwrap();
    let contraction = verify_contraction(
        cert.n,
        cert.nu,
        sys.drift
            .bound_certificate()
            .max(sys.diffusion.bound_certificate()),
        sys.drift
            .lipschitz_certificate()
            .max(sys.diffusion.lipschitz_certificate()),
    );
    let radius = contraction.radius.unwrap();
    let (ens, _) = bounded_solution(
        &sys,
        Equation::Rescaled { epsilon: eps },
        &cert,
        radius,
        HORIZON,
        dt,
        stride,
        PERIOD_PATHS,
        41_009,
    )
    .unwrap();
    let probe = BetaProbe {
        directions: 8,
        shuffles: 5,
        seed: 41_009,
    };
    let mut worst_ratio = 0.0_f64;
    let mut pairs = 0usize;
    for k in 0..ens.n_times() - lag_slots {
        let a = EmpiricalLaw::from_ensemble(&ens, k);
        let b = EmpiricalLaw::from_ensemble(&ens, k + lag_slots);
        let beta = beta_exact(&a, &b).unwrap();
        let floor = noise_floor(&a, &b, &probe).unwrap();
        worst_ratio = worst_ratio.max(beta / floor);
        pairs += 1;
    }
    let periodic_ok = worst_ratio <= REACH_FACTOR;

    // Quasi-periodic coefficients: law distances stay comparable with the
    // mean-square deviations, with a fitted proportionality scale.  The
    // distances come from independently driven ensembles, the deviations
    // from the shared coupled runs on the same grid.
    let qp_sys = scalar_benchmark();
    let qp_avg = AveragedSystem::from_system(&qp_sys).unwrap();
    let qp_cert = fit_dichotomy(&qp_sys.operator, &DichotomyPlan::default()).unwrap();
    let sweep = law_convergence_sweep(
        &qp_sys,
        &qp_avg,
        &qp_cert,
        &SWEEP_EPSILONS,
        &PROBE_TIMES,
        DEVIATION_PATHS,
        &probe,
    )
    .unwrap();
    let mut triples = Vec::new();
    for (i, (_, run)) in shared_runs().iter().enumerate() {
        let times = run.rescaled.times();
        for (j, &t) in PROBE_TIMES.iter().enumerate() {
            let k = (0..times.len())
                .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
                .unwrap();
            let dev = run.rescaled.rms_deviation_from(&run.averaged, k).unwrap();
            let row = &sweep.rows[i * PROBE_TIMES.len() + j];
            assert!((row.t - times[k]).abs() < 1e-9, "probe grids agree");
            triples.push((dev, row.beta, row.noise_floor));
        }
    }
    let comparability = comparability_probe(&triples).unwrap();
    report(
        "law recurrence",
        periodic_ok && comparability.pass,
        &format!(
            "periodic lag {period:.4}: worst beta/floor {worst_ratio:.2} <= {REACH_FACTOR} \
             over {pairs} grid times ({PERIOD_PATHS} paths); quasi-periodic comparability \
             scale {:.3}, pass: {}",
            comparability.scale, comparability.pass
        ),
    );
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn uniform(state: &mut u64) -> f64 {
    (splitmix(state) >> 11) as f64 / (1u64 << 53) as f64
}

fn random_law(state: &mut u64) -> EmpiricalLaw {
    let len = 5 + (splitmix(state) % 6) as usize;
    let pts: Vec<DVector<f64>> = (0..len)
        .map(|_| DVector::from_element(1, 6.0 * uniform(state) - 3.0))
        .collect();
    EmpiricalLaw::from_points(pts).unwrap()
}

#[test]
fn two_point_laws_match_the_closed_form_and_metric_axioms_hold() {
    let mut closed_form_ok = true;
    let mut details = Vec::new();
    for gap in [0.1, 1.0, 10.0] {
        let a = EmpiricalLaw::from_scalars(&[0.0]).unwrap();
        let b = EmpiricalLaw::from_scalars(&[gap]).unwrap();
        let measured = beta_exact(&a, &b).unwrap();
        let exact = 2.0 * gap / (2.0 + gap);
        closed_form_ok &= (measured - exact).abs() <= TWO_POINT_TOL;
        details.push(format!("gap {gap}: {measured:.6} vs {exact:.6}"));
    }
    let mut axioms_ok = true;
    let mut state = 41_010_u64;
    for _ in 0..TRIPLE_COUNT {
        let (a, b, c) = (
            random_law(&mut state),
            random_law(&mut state),
            random_law(&mut state),
        );
        let ab = beta_exact(&a, &b).unwrap();
        let ba = beta_exact(&b, &a).unwrap();
        let bc = beta_exact(&b, &c).unwrap();
        let ac = beta_exact(&a, &c).unwrap();
        let aa = beta_exact(&a, &a).unwrap();
        axioms_ok &= aa <= 1e-12;
        axioms_ok &= (ab - ba).abs() <= AXIOM_TOL;
        axioms_ok &= ac <= ab + bc + AXIOM_TOL;
        axioms_ok &= (0.0..=2.0 + AXIOM_TOL).contains(&ab);
    }
    report(
        "distance estimator",
        closed_form_ok && axioms_ok,
        &format!(
            "{}; metric axioms on {TRIPLE_COUNT} random triples: {axioms_ok}",
            details.join("; ")
        ),
    );
}
