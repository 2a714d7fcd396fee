//! Time-varying linear operators `A(t)` built from the same closed
//! catalog as scalar signals: a constant base matrix, finitely many
//! matrix-valued harmonics, and an optional decaying transient.
//!
//! The harmonic-free base is exactly the infinite-window average of the
//! operator, a fact the averaging engine relies on: no quadrature is
//! involved in forming the averaged operator.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{operator_norm, MAX_DIMENSION};

use super::CoefficientError;

/// One matrix harmonic `cos(freq t) C + sin(freq t) S`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixHarmonic {
    pub freq: f64,
    pub cos: DMatrix<f64>,
    pub sin: DMatrix<f64>,
}

/// `A(t) = base + sum_h harmonics + D exp(-rate |t|)`, evaluated at
/// `t + phase`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVaryingOperator {
    base: DMatrix<f64>,
    harmonics: Vec<MatrixHarmonic>,
    decay: Option<(DMatrix<f64>, f64)>,
    phase: f64,
    dim: usize,
}

impl TimeVaryingOperator {
    pub fn new(
        base: DMatrix<f64>,
        harmonics: Vec<MatrixHarmonic>,
        decay: Option<(DMatrix<f64>, f64)>,
    ) -> Result<Self, CoefficientError> {
        let dim = base.nrows();
        if base.ncols() != dim {
            return Err(CoefficientError::Shape(format!(
                "operator base must be square, got {}x{}",
                base.nrows(),
                base.ncols()
            )));
        }
        if dim == 0 || dim > MAX_DIMENSION {
            return Err(CoefficientError::Dimension(dim));
        }
        if base.iter().any(|x| !x.is_finite()) {
            return Err(CoefficientError::NonFinite("operator base".into()));
        }
        for h in &harmonics {
            if h.cos.shape() != (dim, dim) || h.sin.shape() != (dim, dim) {
                return Err(CoefficientError::Shape(
                    "operator harmonic blocks must match the base shape".into(),
                ));
            }
            if !h.freq.is_finite() || h.freq == 0.0 {
                return Err(CoefficientError::NonFinite("harmonic frequency".into()));
            }
            if h.cos.iter().chain(h.sin.iter()).any(|x| !x.is_finite()) {
                return Err(CoefficientError::NonFinite("operator harmonic".into()));
            }
        }
        if let Some((d, rate)) = &decay {
            if d.shape() != (dim, dim) {
                return Err(CoefficientError::Shape(
                    "operator decay block must match the base shape".into(),
                ));
            }
            if !rate.is_finite() || *rate <= 0.0 {
                return Err(CoefficientError::NonFinite("decay rate".into()));
            }
            if d.iter().any(|x| !x.is_finite()) {
                return Err(CoefficientError::NonFinite("operator decay block".into()));
            }
        }
        Ok(TimeVaryingOperator {
            base,
            harmonics,
            decay,
            phase: 0.0,
            dim,
        })
    }

    pub fn constant(base: DMatrix<f64>) -> Result<Self, CoefficientError> {
        Self::new(base, Vec::new(), None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    pub fn harmonics(&self) -> &[MatrixHarmonic] {
        &self.harmonics
    }

    pub fn is_constant(&self) -> bool {
        self.harmonics.is_empty() && self.decay.is_none()
    }

    /// Evaluate `A(t)` into a caller-provided matrix (hot path for the
    /// propagator integrators).
    pub fn eval_into(&self, t: f64, out: &mut DMatrix<f64>) {
        let u = t + self.phase;
        out.copy_from(&self.base);
        for h in &self.harmonics {
            let (s, c) = (h.freq * u).sin_cos();
            out.zip_zip_apply(&h.cos, &h.sin, |o, hc, hs| *o += c * hc + s * hs);
        }
        if let Some((d, rate)) = &self.decay {
            let e = (-rate * u.abs()).exp();
            out.zip_apply(d, |o, dv| *o += e * dv);
        }
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(self.dim, self.dim);
        self.eval_into(t, &mut out);
        out
    }

    /// Accumulate `out += alpha * A(t) x` without materializing `A(t)`,
    /// by applying each catalog term directly.
    pub fn apply_into(
        &self,
        t: f64,
        x: &DVector<f64>,
        out: &mut DVector<f64>,
        alpha: f64,
    ) {
        let u = t + self.phase;
        out.gemv(alpha, &self.base, x, 1.0);
        for h in &self.harmonics {
            let (s, c) = (h.freq * u).sin_cos();
            out.gemv(alpha * c, &h.cos, x, 1.0);
            out.gemv(alpha * s, &h.sin, x, 1.0);
        }
        if let Some((d, rate)) = &self.decay {
            let e = (-rate * u.abs()).exp();
            out.gemv(alpha * e, d, x, 1.0);
        }
    }

    /// Shift by `tau`; composition of shifts adds phases exactly.
    pub fn shifted(&self, tau: f64) -> Self {
        let mut s = self.clone();
        s.phase += tau;
        s
    }

    /// Uniform bound: `sup_t ||A(t)|| <= ||base|| + sum_h (||C_h|| + ||S_h||)
    /// + ||D||` in operator norm.
    pub fn sup_norm_bound(&self) -> f64 {
        let mut b = operator_norm(&self.base);
        for h in &self.harmonics {
            b += operator_norm(&h.cos) + operator_norm(&h.sin);
        }
        if let Some((d, _)) = &self.decay {
            b += operator_norm(d);
        }
        b
    }

    /// Window average over `[t, t + len]`, entrywise in closed form.
    pub fn window_average(&self, t: f64, len: f64) -> DMatrix<f64> {
        assert!(len > 0.0, "window length must be positive");
        let lo = t + self.phase;
        let hi = lo + len;
        let mut acc = self.base.clone() * len;
        for h in &self.harmonics {
            let cos_w = ((h.freq * hi).sin() - (h.freq * lo).sin()) / h.freq;
            let sin_w = -((h.freq * hi).cos() - (h.freq * lo).cos()) / h.freq;
            acc += &h.cos * cos_w + &h.sin * sin_w;
        }
        if let Some((d, rate)) = &self.decay {
            let w = decay_integral(lo, hi, *rate);
            acc += d * w;
        }
        acc / len
    }

    /// The infinite-window average: exactly the harmonic-free base.
    pub fn mean(&self) -> DMatrix<f64> {
        self.base.clone()
    }

    /// A uniform constant `C` with `||window_average(t, len) - mean|| <=
    /// C / len` for all `t`: each harmonic contributes at most twice its
    /// amplitude over the frequency, the transient at most its total mass.
    pub fn averaging_constant(&self) -> f64 {
        let mut c = 0.0;
        for h in &self.harmonics {
            c += 2.0 * (operator_norm(&h.cos) + operator_norm(&h.sin)) / h.freq.abs();
        }
        if let Some((d, rate)) = &self.decay {
            c += 2.0 * operator_norm(d) / rate;
        }
        c
    }
}

fn decay_integral(lo: f64, hi: f64, rate: f64) -> f64 {
    let anti = |u: f64| u.signum() * (1.0 - (-rate * u.abs()).exp()) / rate;
    anti(hi) - anti(lo)
}
