//! Finite-window averaging of recurrent coefficients and the contraction
//! conditions under which the averaged system certifies a unique bounded
//! solution of the original one.
//!
//! Window averages of the harmonic/decay catalog are closed-form; only
//! Levitan terms and squared diffusion gaps fall back to adaptive
//! quadrature (absolute tolerance 1e-9).  The infinite-window averaged
//! operator is exactly the harmonic-free base, so no quadrature error
//! enters the averaged system itself.
//!
//! Decay moduli quantify how fast window averages settle: from sampled
//! gap values on a grid of window lengths we keep the running maximum
//! from the right, a monotone envelope that dominates the samples, and
//! flag it vanishing only when its tail actually drops two orders of
//! magnitude below its head.  Nothing is extrapolated: if the data does
//! not show decay, the flag stays off and downstream checks fail loudly.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::coefficients::{
    CoefficientSystem, NonlinearTerm, TimeSignal, TimeVaryingOperator, VectorField,
};
use crate::numerics::adaptive_simpson;

#[derive(Debug, Error)]
pub enum AveragingError {
    #[error("window length must be positive and finite, got {0}")]
    InvalidWindow(f64),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("coefficient construction failed: {0}")]
    Coefficient(#[from] crate::coefficients::CoefficientError),
}

/// Quadrature tolerance used whenever a closed form is unavailable.  The
/// tolerance applies to window averages, not raw integrals: integral
/// tolerances scale with the window length.
pub const QUADRATURE_TOLERANCE: f64 = 1e-9;

/// Window length used to average Levitan terms when forming an averaged
/// system.  Levitan terms have no settled infinite-window mean, so their
/// averaged value is declared relative to this window and flagged as such.
pub const LEVITAN_AVERAGE_WINDOW: f64 = 2000.0;

/// Average of `A` over `[t, t + len]`.
pub fn average_operator(
    a: &TimeVaryingOperator,
    len: f64,
    t: f64,
) -> Result<DMatrix<f64>, AveragingError> {
    if !(len.is_finite() && len > 0.0) {
        return Err(AveragingError::InvalidWindow(len));
    }
    Ok(a.window_average(t, len))
}

/// Average of `F(., x)` over `[t, t + len]`.
pub fn average_drift(
    f: &VectorField,
    x: &DVector<f64>,
    len: f64,
    t: f64,
) -> Result<DVector<f64>, AveragingError> {
    if !(len.is_finite() && len > 0.0) {
        return Err(AveragingError::InvalidWindow(len));
    }
    if x.len() != f.dim() {
        return Err(AveragingError::Shape(format!(
            "state has dimension {}, field has {}",
            x.len(),
            f.dim()
        )));
    }
    let mut out = DVector::<f64>::zeros(f.dim());
    for (o, s) in out.iter_mut().zip(f.offset().iter()) {
        *o = s.window_average(t, len);
    }
    if let Some(op) = f.linear() {
        let a = op.window_average(t, len);
        out.gemv(1.0, &a, x, 1.0);
    }
    let mut scratch = DVector::<f64>::zeros(f.dim());
    for term in f.nonlinear() {
        let w = term.amplitude * term.time.window_average(t, len);
        if w != 0.0 {
            term.saturation.apply_into(x, &mut scratch);
            out.axpy(w, &scratch, 1.0);
        }
    }
    Ok(out)
}

/// Mean-square gap `(1/len) int_t^{t+len} |G(s, x) - g_bar(x)|^2 ds`,
/// by adaptive quadrature.  This is the quantity that must vanish for the
/// diffusion to be averageable; a persistent harmonic in `G` leaves it
/// bounded away from zero, which is reported, not repaired.
pub fn average_diffusion_gap(
    g: &VectorField,
    g_bar: &VectorField,
    x: &DVector<f64>,
    len: f64,
    t: f64,
) -> Result<f64, AveragingError> {
    if !(len.is_finite() && len > 0.0) {
        return Err(AveragingError::InvalidWindow(len));
    }
    if x.len() != g.dim() || g_bar.dim() != g.dim() {
        return Err(AveragingError::Shape(
            "state and field dimensions disagree".into(),
        ));
    }
    let target = g_bar.at(t, x);
    let mut out = DVector::<f64>::zeros(g.dim());
    let mut scratch = DVector::<f64>::zeros(g.dim());
    let mut integrand = |s: f64| {
        out.fill(0.0);
        g.eval_into(s, x, &mut out, &mut scratch);
        let mut acc = 0.0;
        for (gi, bi) in out.iter().zip(target.iter()) {
            let d = gi - bi;
            acc += d * d;
        }
        acc
    };
    let tol = QUADRATURE_TOLERANCE * len.max(1.0);
    Ok(adaptive_simpson(&mut integrand, t, t + len, tol) / len)
}

/// Monotone decay envelope fitted to sampled gap values.
#[derive(Debug, Clone)]
pub struct DecayModulus {
    /// Window lengths, ascending.
    pub window_lengths: Vec<f64>,
    /// Raw sampled gap values, same order.
    pub samples: Vec<f64>,
    /// Running maximum from the right: a nonincreasing envelope that
    /// dominates every sample at or beyond each window length.
    pub envelope: Vec<f64>,
    /// True when the envelope tail has dropped below 1% of its head.
    pub vanishing: bool,
}

impl DecayModulus {
    /// Envelope value at the largest window length.
    pub fn tail(&self) -> f64 {
        *self.envelope.last().unwrap_or(&f64::NAN)
    }
}

/// Fit a decay envelope to `(window length, gap)` samples.
pub fn fit_decay_modulus(samples: &[(f64, f64)]) -> Result<DecayModulus, AveragingError> {
    if samples.is_empty() {
        return Err(AveragingError::Shape("no samples to fit".into()));
    }
    let mut sorted: Vec<(f64, f64)> = samples.to_vec();
    if sorted
        .iter()
        .any(|(l, g)| !l.is_finite() || *l <= 0.0 || !g.is_finite() || *g < 0.0)
    {
        return Err(AveragingError::Shape(
            "window lengths must be positive, gaps nonnegative".into(),
        ));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lengths: Vec<f64> = sorted.iter().map(|s| s.0).collect();
    let gaps: Vec<f64> = sorted.iter().map(|s| s.1).collect();
    let mut envelope = gaps.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let head = envelope[0];
    let tail = *envelope.last().unwrap();
    let vanishing = tail <= (0.01 * head).max(1e-14);
    Ok(DecayModulus {
        window_lengths: lengths,
        samples: gaps,
        envelope,
        vanishing,
    })
}

/// The autonomous averaged system of a recurrent coefficient system.
#[derive(Debug, Clone)]
pub struct AveragedSystem {
    /// Averaged operator: exactly the harmonic-free base of `A`.
    pub a_bar: DMatrix<f64>,
    /// Averaged drift; certificates inherited unchanged from `F`.
    pub f_bar: VectorField,
    /// Averaged diffusion; certificates inherited unchanged from `G`.
    pub g_bar: VectorField,
    /// True when a Levitan term forced a window-relative average.
    pub window_relative: bool,
}

fn averaged_signal(s: &TimeSignal, window_relative: &mut bool) -> TimeSignal {
    match s.mean() {
        Some(m) => TimeSignal::constant(m),
        None => {
            *window_relative = true;
            TimeSignal::constant(s.window_average(0.0, LEVITAN_AVERAGE_WINDOW))
        }
    }
}

fn averaged_field(
    f: &VectorField,
    window_relative: &mut bool,
) -> Result<VectorField, AveragingError> {
    let offset = f
        .offset()
        .iter()
        .map(|s| averaged_signal(s, window_relative))
        .collect();
    let linear = match f.linear() {
        Some(op) => Some(TimeVaryingOperator::constant(op.mean())?),
        None => None,
    };
    let nonlinear = f
        .nonlinear()
        .iter()
        .map(|term| NonlinearTerm {
            amplitude: term.amplitude,
            time: averaged_signal(&term.time, window_relative),
            saturation: term.saturation,
        })
        .collect();
    // Certificates transfer unchanged: averaging a family of maps with a
    // common bound at the origin and a common Lipschitz constant yields a
    // map with the same certificates.
    Ok(VectorField::new(
        offset,
        linear,
        nonlinear,
        f.bound_certificate(),
        f.lipschitz_certificate(),
    )?)
}

impl AveragedSystem {
    pub fn from_system(system: &CoefficientSystem) -> Result<Self, AveragingError> {
        let mut window_relative = false;
        let a_bar = system.operator.mean();
        let f_bar = averaged_field(&system.drift, &mut window_relative)?;
        let g_bar = averaged_field(&system.diffusion, &mut window_relative)?;
        Ok(AveragedSystem {
            a_bar,
            f_bar,
            g_bar,
            window_relative,
        })
    }

    pub fn dim(&self) -> usize {
        self.a_bar.nrows()
    }

    /// Whether the averaged coefficients are state-independent, so the
    /// averaged equation is a linear diffusion with additive noise.
    pub fn is_linear_additive(&self) -> bool {
        self.f_bar.is_state_independent() && self.g_bar.is_state_independent()
    }
}

/// The three smallness conditions relating the dichotomy constants
/// `(N, nu)` of the linear part to the Lipschitz certificate `L` of the
/// nonlinearities, and the induced bounded-solution radius.
#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub n: f64,
    pub nu: f64,
    pub bound: f64,
    pub lipschitz: f64,
    /// `L < nu / (N sqrt(2 + nu))`: a unique bounded solution exists.
    pub unique_bounded: bool,
    /// `L < nu / (2 N sqrt(1 + nu))`: the bounded solution inherits the
    /// compatibility of the coefficients in distribution.
    pub compatible_in_distribution: bool,
    /// `L < nu / (sqrt(3) N sqrt(2 + nu))`: margin used by the
    /// convergence statements for the averaged approximation.
    pub convergence_margin: bool,
    /// Radius `N M sqrt(2 + nu) / (nu - N L sqrt(2 + nu))` of the ball
    /// containing the bounded solution, when `unique_bounded` holds.
    pub radius: Option<f64>,
}

/// Evaluate the contraction conditions for dichotomy constants `(n, nu)`
/// and field certificates `(bound, lipschitz)`.
pub fn verify_contraction(n: f64, nu: f64, bound: f64, lipschitz: f64) -> ContractionReport {
    assert!(n >= 1.0 && nu > 0.0, "dichotomy constants out of range");
    assert!(bound >= 0.0 && lipschitz >= 0.0);
    let s2 = (2.0 + nu).sqrt();
    let unique = lipschitz < nu / (n * s2);
    let compatible = lipschitz < nu / (2.0 * n * (1.0 + nu).sqrt());
    let margin = lipschitz < nu / (3.0_f64.sqrt() * n * s2);
    let radius = if unique {
        Some(n * bound * s2 / (nu - n * lipschitz * s2))
    } else {
        None
    };
    ContractionReport {
        n,
        nu,
        bound,
        lipschitz,
        unique_bounded: unique,
        compatible_in_distribution: compatible,
        convergence_margin: margin,
        radius,
    }
}
