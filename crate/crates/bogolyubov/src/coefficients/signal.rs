//! Scalar recurrent time signals.
//!
//! A [`TimeSignal`] is a finite sum
//!
//! ```text
//! s(t) = c + sum_h [ a_h cos(w_h t) + b_h sin(w_h t) ]
//!          + d * exp(-r |t|)
//!          + q * 1 / (2 + cos t + cos(sqrt(2) t))
//! ```
//!
//! evaluated at `t + phase`.  Shifting a signal only moves `phase`, so
//! shift composition is exact (no resampling, no drift in the harmonic
//! coefficients).  The catalog covers every recurrence class exercised by
//! the shipped scenarios: constants (stationary), single harmonics
//! (periodic), incommensurate harmonic sums (quasi-periodic), a decaying
//! transient, and the classical reciprocal-trigonometric example of a
//! Levitan-only almost periodic function, which is unbounded on the whole
//! line yet finite on every compact window.

use serde::{Deserialize, Serialize};

/// One harmonic term `cos_coef * cos(freq t) + sin_coef * sin(freq t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub freq: f64,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

impl Harmonic {
    /// Peak amplitude of this term.
    pub fn amplitude(&self) -> f64 {
        self.cos.hypot(self.sin)
    }
}

/// Transient term `coef * exp(-rate |t|)` with `rate > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTerm {
    pub coef: f64,
    pub rate: f64,
}

/// The reciprocal-trigonometric example `1 / (2 + cos t + cos(sqrt(2) t))`.
///
/// The denominator is strictly positive, so values lie in `[1/4, inf)`;
/// near-resonances of `t` against `sqrt(2) t` push the value above any
/// fixed bound on long windows while every compact window stays finite.
pub fn levitan_example(t: f64) -> f64 {
    1.0 / (2.0 + t.cos() + (std::f64::consts::SQRT_2 * t).cos())
}

/// A scalar recurrent signal from the crate's closed catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSignal {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub harmonics: Vec<Harmonic>,
    #[serde(default)]
    pub decay: Option<DecayTerm>,
    /// Coefficient on the Levitan example term.
    #[serde(default)]
    pub levitan: f64,
    /// Accumulated shift: the signal is evaluated at `t + phase`.
    #[serde(default)]
    pub phase: f64,
}

impl TimeSignal {
    pub fn constant(c: f64) -> Self {
        TimeSignal {
            constant: c,
            harmonics: Vec::new(),
            decay: None,
            levitan: 0.0,
            phase: 0.0,
        }
    }

    pub fn cosine(freq: f64, amplitude: f64) -> Self {
        TimeSignal {
            constant: 0.0,
            harmonics: vec![Harmonic {
                freq,
                cos: amplitude,
                sin: 0.0,
            }],
            decay: None,
            levitan: 0.0,
            phase: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0
            && self.levitan == 0.0
            && self.harmonics.iter().all(|h| h.cos == 0.0 && h.sin == 0.0)
            && self.decay.as_ref().map_or(true, |d| d.coef == 0.0)
    }

    pub fn value(&self, t: f64) -> f64 {
        let u = t + self.phase;
        let mut v = self.constant;
        for h in &self.harmonics {
            let (s, c) = (h.freq * u).sin_cos();
            v += h.cos * c + h.sin * s;
        }
        if let Some(d) = &self.decay {
            v += d.coef * (-d.rate * u.abs()).exp();
        }
        if self.levitan != 0.0 {
            v += self.levitan * levitan_example(u);
        }
        v
    }

    /// Shift by `tau`: the returned signal evaluates to `self(t + tau)`.
    /// Composing shifts adds phases, so the group law holds exactly.
    pub fn shifted(&self, tau: f64) -> Self {
        let mut s = self.clone();
        s.phase += tau;
        s
    }

    /// Whether the signal contains a term without a closed-form window
    /// average (the Levitan term is the only such term in the catalog).
    pub fn has_levitan_term(&self) -> bool {
        self.levitan != 0.0
    }

    /// Supremum bound over the whole line, when one exists.  The Levitan
    /// term is unbounded on the line, so any signal containing it reports
    /// `None`; callers fall back to window-sampled bounds.
    pub fn sup_bound(&self) -> Option<f64> {
        if self.has_levitan_term() {
            return None;
        }
        let mut b = self.constant.abs();
        for h in &self.harmonics {
            b += h.amplitude();
        }
        if let Some(d) = &self.decay {
            b += d.coef.abs();
        }
        Some(b)
    }

    /// Average over the window `[t, t + len]`.
    ///
    /// Harmonic and decay terms integrate in closed form; the Levitan term
    /// falls back to adaptive quadrature.  The quadrature tolerance scales
    /// with the window length, so it is the returned average that is good
    /// to about `1e-9`; a flat integral tolerance would make long windows
    /// around the near-resonant spikes of the Levitan term intractable.
    pub fn window_average(&self, t: f64, len: f64) -> f64 {
        assert!(len > 0.0, "window length must be positive");
        let lo = t + self.phase;
        let hi = lo + len;
        let mut integral = self.constant * len;
        for h in &self.harmonics {
            // Antiderivative of a cos(w u) + b sin(w u).
            integral += h.cos / h.freq * ((h.freq * hi).sin() - (h.freq * lo).sin());
            integral += -h.sin / h.freq * ((h.freq * hi).cos() - (h.freq * lo).cos());
        }
        if let Some(d) = &self.decay {
            integral += d.coef * (decay_antiderivative(hi, d.rate) - decay_antiderivative(lo, d.rate));
        }
        if self.levitan != 0.0 {
            let q = self.levitan;
            integral += crate::numerics::adaptive_simpson(
                &mut |u: f64| q * levitan_example(u),
                lo,
                hi,
                1e-9 * len.max(1.0),
            );
        }
        integral / len
    }

    /// The infinite-window mean for the closed-form part of the catalog:
    /// harmonics and the decay transient average to zero, leaving the
    /// constant.  Signals with a Levitan term have no settled mean (their
    /// window averages drift logarithmically), so this returns `None` for
    /// them.
    pub fn mean(&self) -> Option<f64> {
        if self.has_levitan_term() {
            None
        } else {
            Some(self.constant)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.constant.is_finite()
            && self.phase.is_finite()
            && self.levitan.is_finite()
            && self
                .harmonics
                .iter()
                .all(|h| h.freq.is_finite() && h.freq != 0.0 && h.cos.is_finite() && h.sin.is_finite())
            && self
                .decay
                .as_ref()
                .map_or(true, |d| d.coef.is_finite() && d.rate.is_finite() && d.rate > 0.0)
    }
}

/// Antiderivative of `exp(-rate |u|)`, continuous and odd.
fn decay_antiderivative(u: f64, rate: f64) -> f64 {
    u.signum() * (1.0 - (-rate * u.abs()).exp()) / rate
}
