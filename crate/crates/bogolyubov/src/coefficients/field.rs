//! Drift and diffusion fields `F(t, x)`, `G(t, x)` in semilinear form:
//! a time-dependent offset, an optional time-varying linear part, and a
//! finite sum of bounded nonlinearities
//!
//! ```text
//! field(t, x) = c0(t) + C1(t) x + sum_k  amp_k * s_k(t) * sat_k(x)
//! ```
//!
//! where each saturation comes from a closed catalog of globally
//! Lipschitz, bounded maps vanishing at the origin.  Every field carries
//! two declared certificates: `bound` for `sup_t |field(t, 0)|` and
//! `lipschitz` for the uniform Lipschitz constant in `x`.  Certificates
//! are validated by Monte Carlo sampling in [`verify_certificates`]; a
//! violation is reported with the witnessing sample, never silently
//! repaired.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::linalg::MAX_DIMENSION;

use super::{CoefficientError, TimeSignal, TimeVaryingOperator};

/// Catalog of bounded state nonlinearities.  All three vanish at the
/// origin, are 1-Lipschitz, and are bounded (by 1, 1 and 1/2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Saturation {
    /// Componentwise hyperbolic tangent.
    Tanh,
    /// Componentwise sine.
    Sin,
    /// The radial map `x / (1 + |x|^2)`.
    BoundedQuadratic,
}

impl Saturation {
    pub fn apply_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            Saturation::Tanh => {
                out.zip_apply(x, |o, xi| *o = xi.tanh());
            }
            Saturation::Sin => {
                out.zip_apply(x, |o, xi| *o = xi.sin());
            }
            Saturation::BoundedQuadratic => {
                let r2 = x.norm_squared();
                let scale = 1.0 / (1.0 + r2);
                out.zip_apply(x, |o, xi| *o = xi * scale);
            }
        }
    }

    /// Global Lipschitz constant of the map.
    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    /// Global bound `sup_x |sat(x)|`.
    pub fn bound(&self) -> f64 {
        match self {
            Saturation::Tanh | Saturation::Sin => 1.0,
            Saturation::BoundedQuadratic => 0.5,
        }
    }
}

/// One bounded nonlinear term `amplitude * time(t) * saturation(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearTerm {
    pub amplitude: f64,
    pub time: TimeSignal,
    pub saturation: Saturation,
}

/// Semilinear vector field with declared certificates.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    offset: Vec<TimeSignal>,
    linear: Option<TimeVaryingOperator>,
    nonlinear: Vec<NonlinearTerm>,
    bound: f64,
    lipschitz: f64,
    dim: usize,
}

impl VectorField {
    pub fn new(
        offset: Vec<TimeSignal>,
        linear: Option<TimeVaryingOperator>,
        nonlinear: Vec<NonlinearTerm>,
        bound: f64,
        lipschitz: f64,
    ) -> Result<Self, CoefficientError> {
        let dim = offset.len();
        if dim == 0 || dim > MAX_DIMENSION {
            return Err(CoefficientError::Dimension(dim));
        }
        for s in &offset {
            if !s.is_finite() {
                return Err(CoefficientError::NonFinite("field offset signal".into()));
            }
        }
        if let Some(op) = &linear {
            if op.dim() != dim {
                return Err(CoefficientError::Shape(format!(
                    "linear part has dimension {}, offset has {}",
                    op.dim(),
                    dim
                )));
            }
        }
        for term in &nonlinear {
            if !term.amplitude.is_finite() || !term.time.is_finite() {
                return Err(CoefficientError::NonFinite("nonlinear term".into()));
            }
        }
        if !(bound.is_finite() && bound >= 0.0 && lipschitz.is_finite() && lipschitz >= 0.0) {
            return Err(CoefficientError::NonFinite("certificates".into()));
        }
        Ok(VectorField {
            offset,
            linear,
            nonlinear,
            bound,
            lipschitz,
            dim,
        })
    }

    /// A state-independent field `t -> c0(t)` with derived certificates
    /// when the offset signals admit closed-form bounds.
    pub fn autonomous_offset(offset: Vec<TimeSignal>) -> Result<Self, CoefficientError> {
        let bound = offset
            .iter()
            .map(|s| s.sup_bound())
            .try_fold(0.0_f64, |acc, b| b.map(|b| acc + b))
            .ok_or_else(|| {
                CoefficientError::NonFinite(
                    "offset with a Levitan term needs an explicit window-certified bound".into(),
                )
            })?;
        Self::new(offset, None, Vec::new(), bound, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound_certificate(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz_certificate(&self) -> f64 {
        self.lipschitz
    }

    pub fn offset(&self) -> &[TimeSignal] {
        &self.offset
    }

    pub fn linear(&self) -> Option<&TimeVaryingOperator> {
        self.linear.as_ref()
    }

    pub fn nonlinear(&self) -> &[NonlinearTerm] {
        &self.nonlinear
    }

    /// Whether the field depends on the state at all.
    pub fn is_state_independent(&self) -> bool {
        self.linear.is_none() && self.nonlinear.is_empty()
    }

    /// Whether the field depends on time.
    pub fn is_autonomous(&self) -> bool {
        self.offset.iter().all(|s| {
            s.harmonics.is_empty() && s.decay.is_none() && !s.has_levitan_term()
        }) && self.linear.as_ref().map_or(true, |op| op.is_constant())
            && self.nonlinear.iter().all(|term| {
                term.time.harmonics.is_empty()
                    && term.time.decay.is_none()
                    && !term.time.has_levitan_term()
            })
    }

    /// Evaluate into a caller-provided vector; `scratch` must have the
    /// field dimension and is clobbered.
    pub fn eval_into(
        &self,
        t: f64,
        x: &DVector<f64>,
        out: &mut DVector<f64>,
        scratch: &mut DVector<f64>,
    ) {
        for (o, s) in out.iter_mut().zip(self.offset.iter()) {
            *o = s.value(t);
        }
        if let Some(op) = &self.linear {
            op.apply_into(t, x, out, 1.0);
        }
        for term in &self.nonlinear {
            let w = term.amplitude * term.time.value(t);
            if w != 0.0 {
                term.saturation.apply_into(x, scratch);
                out.axpy(w, scratch, 1.0);
            }
        }
    }

    pub fn at(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::<f64>::zeros(self.dim);
        let mut scratch = DVector::<f64>::zeros(self.dim);
        self.eval_into(t, x, &mut out, &mut scratch);
        out
    }

    /// Shift time by `tau` in every time-dependent part.
    pub fn shifted(&self, tau: f64) -> Self {
        VectorField {
            offset: self.offset.iter().map(|s| s.shifted(tau)).collect(),
            linear: self.linear.as_ref().map(|op| op.shifted(tau)),
            nonlinear: self
                .nonlinear
                .iter()
                .map(|term| NonlinearTerm {
                    amplitude: term.amplitude,
                    time: term.time.shifted(tau),
                    saturation: term.saturation,
                })
                .collect(),
            bound: self.bound,
            lipschitz: self.lipschitz,
            dim: self.dim,
        }
    }

    /// Whether any constituent signal contains a Levitan term (those
    /// average by quadrature, not in closed form, and their certificates
    /// are window-relative).
    pub fn has_levitan_term(&self) -> bool {
        self.offset.iter().any(|s| s.has_levitan_term())
            || self.nonlinear.iter().any(|t| t.time.has_levitan_term())
    }
}

/// Worst observed certificate ratios from a Monte Carlo check.
#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub samples: u64,
    /// max |field(t, 0)| / bound over sampled t (1 means tight).
    pub worst_bound_ratio: f64,
    /// max |field(t,x1) - field(t,x2)| / (L |x1 - x2|) over samples.
    pub worst_lipschitz_ratio: f64,
}

/// Relative slack allowed before a sampled certificate ratio counts as a
/// violation.
pub const CERTIFICATE_TOLERANCE: f64 = 1e-9;

/// Time window sampled by the Monte Carlo certificate check.
pub const CERTIFICATE_TIME_WINDOW: f64 = 200.0;

/// Radius of the state ball sampled by the Lipschitz check.
pub const CERTIFICATE_STATE_RADIUS: f64 = 5.0;

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub(crate) fn unit_from(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Monte Carlo check of the declared `(bound, lipschitz)` certificates of
/// one field.  `label` names the field in error messages.
pub fn verify_field_certificates(
    field: &VectorField,
    label: &str,
    sample_count: u64,
    seed: u64,
) -> Result<CertificateReport, CoefficientError> {
    let d = field.dim();
    let mut worst_bound: f64 = 0.0;
    let mut worst_lip: f64 = 0.0;
    let zero = DVector::<f64>::zeros(d);
    let mut x1 = DVector::<f64>::zeros(d);
    let mut x2 = DVector::<f64>::zeros(d);
    let mut f1 = DVector::<f64>::zeros(d);
    let mut f2 = DVector::<f64>::zeros(d);
    let mut scratch = DVector::<f64>::zeros(d);
    for k in 0..sample_count {
        let s0 = mix64(seed ^ mix64(k));
        let t = (unit_from(s0) * 2.0 - 1.0) * CERTIFICATE_TIME_WINDOW;
        // Bound certificate at the origin.
        f1.fill(0.0);
        field.eval_into(t, &zero, &mut f1, &mut scratch);
        let b = f1.norm();
        let bound_ratio = if field.bound == 0.0 {
            if b > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            b / field.bound
        };
        if bound_ratio > worst_bound {
            worst_bound = bound_ratio;
        }
        if bound_ratio > 1.0 + CERTIFICATE_TOLERANCE {
            return Err(CoefficientError::CertificateViolation {
                field: label.to_string(),
                kind: "bound".into(),
                t,
                observed: b,
                declared: field.bound,
            });
        }
        // Lipschitz certificate on a sampled pair.
        for i in 0..d {
            x1[i] = (unit_from(mix64(s0 ^ (2 * i as u64 + 1))) * 2.0 - 1.0)
                * CERTIFICATE_STATE_RADIUS;
            x2[i] = (unit_from(mix64(s0 ^ (2 * i as u64 + 2))) * 2.0 - 1.0)
                * CERTIFICATE_STATE_RADIUS;
        }
        let dx = (&x1 - &x2).norm();
        if dx == 0.0 {
            continue;
        }
        f1.fill(0.0);
        f2.fill(0.0);
        field.eval_into(t, &x1, &mut f1, &mut scratch);
        field.eval_into(t, &x2, &mut f2, &mut scratch);
        let df = (&f1 - &f2).norm();
        let lip_ratio = if field.lipschitz == 0.0 {
            if df > 1e-14 * dx {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            df / (field.lipschitz * dx)
        };
        if lip_ratio > worst_lip {
            worst_lip = lip_ratio;
        }
        if lip_ratio > 1.0 + CERTIFICATE_TOLERANCE {
            return Err(CoefficientError::CertificateViolation {
                field: label.to_string(),
                kind: "lipschitz".into(),
                t,
                observed: df / dx,
                declared: field.lipschitz,
            });
        }
    }
    Ok(CertificateReport {
        samples: sample_count,
        worst_bound_ratio: worst_bound,
        worst_lipschitz_ratio: worst_lip,
    })
}
