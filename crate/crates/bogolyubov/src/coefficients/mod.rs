//! Recurrent-in-time coefficient data for semilinear stochastic systems:
//! the operator `A(t)`, the drift field `F(t, x)` and the diffusion field
//! `G(t, x)`, together with their shift dynamics, recurrence taxonomy and
//! bound/Lipschitz certificates.
//!
//! All time dependence comes from a closed catalog (constants, harmonics,
//! a decaying transient, and the Levitan reciprocal-trigonometric
//! example), so shifting is exact phase bookkeeping and finite-window
//! averages have closed forms wherever the Levitan term is absent.

mod field;
mod operator;
mod recurrence;
mod signal;

pub use field::{
    verify_field_certificates, CertificateReport, NonlinearTerm, Saturation, VectorField,
    CERTIFICATE_STATE_RADIUS, CERTIFICATE_TIME_WINDOW, CERTIFICATE_TOLERANCE,
};
pub(crate) use field::{mix64, unit_from};
pub use operator::{MatrixHarmonic, TimeVaryingOperator};
pub use recurrence::{
    bebutov_distance, find_almost_periods, shift_defect, AlmostPeriodSearch, BebutovDistance,
    RecurrenceClass, TimeComparable,
};
pub use signal::{levitan_example, DecayTerm, Harmonic, TimeSignal};

use nalgebra::DVector;
use thiserror::Error;

use crate::linalg::operator_norm;

#[derive(Debug, Error)]
pub enum CoefficientError {
    #[error("state dimension {0} is outside 1..=16")]
    Dimension(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite or out-of-range value in {0}")]
    NonFinite(String),
    #[error(
        "certificate violation in {field} ({kind}): observed {observed:.6e} exceeds declared \
         {declared:.6e} at t = {t:.6}"
    )]
    CertificateViolation {
        field: String,
        kind: String,
        t: f64,
        observed: f64,
        declared: f64,
    },
}

/// Full coefficient data of one semilinear system
/// `dX = eps (A(t) X + F(t, X)) dt + sqrt(eps) G(t, X) dW`.
#[derive(Debug, Clone)]
pub struct CoefficientSystem {
    pub operator: TimeVaryingOperator,
    pub drift: VectorField,
    pub diffusion: VectorField,
    pub recurrence: RecurrenceClass,
    /// Largest admissible time-scale parameter for this system.
    pub eps0: f64,
}

impl CoefficientSystem {
    pub fn new(
        operator: TimeVaryingOperator,
        drift: VectorField,
        diffusion: VectorField,
        recurrence: RecurrenceClass,
        eps0: f64,
    ) -> Result<Self, CoefficientError> {
        let dim = operator.dim();
        if drift.dim() != dim || diffusion.dim() != dim {
            return Err(CoefficientError::Shape(format!(
                "operator, drift and diffusion dimensions disagree: {} / {} / {}",
                dim,
                drift.dim(),
                diffusion.dim()
            )));
        }
        if !(eps0.is_finite() && eps0 > 0.0) {
            return Err(CoefficientError::NonFinite("eps0".into()));
        }
        Ok(CoefficientSystem {
            operator,
            drift,
            diffusion,
            recurrence,
            eps0,
        })
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    /// Shift every coefficient by `tau`.
    pub fn shifted(&self, tau: f64) -> Self {
        CoefficientSystem {
            operator: self.operator.shifted(tau),
            drift: self.drift.shifted(tau),
            diffusion: self.diffusion.shifted(tau),
            recurrence: self.recurrence.clone(),
            eps0: self.eps0,
        }
    }

    /// Monte Carlo validation of both field certificates; fails with the
    /// first witnessed violation.
    pub fn verify_certificates(
        &self,
        sample_count: u64,
        seed: u64,
    ) -> Result<(CertificateReport, CertificateReport), CoefficientError> {
        let drift = verify_field_certificates(&self.drift, "drift", sample_count, seed)?;
        let diffusion =
            verify_field_certificates(&self.diffusion, "diffusion", sample_count, seed ^ 0x5bf0)?;
        Ok((drift, diffusion))
    }
}

/// Fixed probe states used when comparing fields pointwise in time: the
/// origin plus axis points at radii 1/2, 1 and 2.  Fields in this crate
/// are affine plus a 1-Lipschitz saturation, so closeness on this probe
/// set controls closeness on the whole ball of radius 2.
pub fn probe_points(dim: usize) -> Vec<DVector<f64>> {
    let mut pts = vec![DVector::<f64>::zeros(dim)];
    for i in 0..dim {
        for r in [0.5_f64, 1.0, 2.0] {
            let mut up = DVector::<f64>::zeros(dim);
            up[i] = r;
            pts.push(up);
            let mut down = DVector::<f64>::zeros(dim);
            down[i] = -r;
            pts.push(down);
        }
    }
    pts
}

impl TimeComparable for TimeSignal {
    fn pointwise_distance(&self, other: &Self, t: f64, tau: f64) -> f64 {
        (self.value(t + tau) - other.value(t)).abs()
    }
}

impl TimeComparable for TimeVaryingOperator {
    fn pointwise_distance(&self, other: &Self, t: f64, tau: f64) -> f64 {
        operator_norm(&(self.at(t + tau) - other.at(t)))
    }
}

impl TimeComparable for VectorField {
    fn pointwise_distance(&self, other: &Self, t: f64, tau: f64) -> f64 {
        let probes = probe_points(self.dim());
        let mut sup: f64 = 0.0;
        for x in &probes {
            sup = sup.max((self.at(t + tau, x) - other.at(t, x)).norm());
        }
        sup
    }
}

impl TimeComparable for CoefficientSystem {
    fn pointwise_distance(&self, other: &Self, t: f64, tau: f64) -> f64 {
        self.operator
            .pointwise_distance(&other.operator, t, tau)
            .max(self.drift.pointwise_distance(&other.drift, t, tau))
            .max(self.diffusion.pointwise_distance(&other.diffusion, t, tau))
    }
}
