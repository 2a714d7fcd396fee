//! Desk-scale verification toolkit for averaging of semilinear stochastic
//! systems with recurrent-in-time coefficients.
//!
//! The toolkit studies equations of the form
//!
//! ```text
//! dX = eps * (A(t) X + F(t, X)) dt + sqrt(eps) * G(t, X) dW(t)
//! ```
//!
//! whose coefficients are recurrent in time (periodic, quasi-periodic,
//! almost periodic in the Bohr or Levitan sense), together with the
//! time-rescaled form obtained by `t -> t / eps` and the autonomous
//! averaged system obtained by replacing `A`, `F`, `G` with their uniform
//! time averages.  Everything here is numerical and desk-scale: dense
//! linear algebra up to dimension 16, Monte Carlo ensembles of a few
//! thousand paths, and grid-sampled envelopes standing in for suprema
//! over the real line.
//!
//! Module map:
//!
//! * [`linalg`] - dense matrix kernels: exponentials, spectral abscissa,
//!   stationary covariance.
//! * [`coefficients`] - recurrent time signals, operators and vector
//!   fields with bound/Lipschitz certificates, shift dynamics and the
//!   compact-open (Bebutov) distance.
//! * [`averaging`] - finite-window averages, decay moduli, the averaged
//!   system, and the contraction conditions for a unique bounded solution.
//! * [`flow`] - propagators of linear time-varying systems, exponential
//!   dichotomy fits, and the rescaled-vs-averaged propagator gap.
//! * [`sde`] - Euler-Maruyama ensembles, bounded-solution burn-in,
//!   stochastic convolutions, exact stationary sampling, coupled
//!   deviations.
//! * [`metrics`] - bounded-Lipschitz distance between empirical laws,
//!   convergence sweeps, comparability probes.
//! * [`scenario`] - declarative scenario configs and the staged runner
//!   behind the command-line interface.

pub mod averaging;
pub mod coefficients;
pub mod flow;
pub mod linalg;
pub mod metrics;
pub mod scenario;
pub mod sde;

pub(crate) mod numerics;
