//! Declarative scenario files and the staged verification run.
//!
//! A scenario is a TOML document (schema `bogolyubov/1`) that declares one
//! coefficient system out of the closed catalog, the run parameters, and
//! the expected outcomes.  [`Scenario::execute`] drives the whole pipeline
//! on it: certificate audit, averaging scan, dichotomy fit, contraction
//! check, rescaled flow gap, coupled deviation, law distances and the
//! comparability probe.  Each stage writes one CSV; a `summary.txt`
//! records the headline numbers and compares observed outcomes against
//! the `[expectations]` block.  Unknown keys are rejected everywhere, so
//! a typo cannot silently relax a check.
//!
//! ```
//! use bogolyubov::scenario::Scenario;
//!
//! let text = r#"
//!     schema = "bogolyubov/1"
//!     name = "doc_example"
//!
//!     [system]
//!     eps0 = 0.25
//!     recurrence = { class = "periodic", period = 6.283185307179586 }
//!
//!     [system.operator]
//!     base = [[-1.0]]
//!
//!     [system.drift]
//!     offset = [{ harmonics = [{ freq = 1.0, cos = 1.0 }] }]
//!
//!     [system.diffusion]
//!     offset = [{ constant = 1.0 }]
//!
//!     [run]
//!     epsilons = [0.2, 0.1]
//!     probe_times = [1.0]
//! "#;
//! let scenario = Scenario::from_toml_str(text).unwrap();
//! let system = scenario.build_system().unwrap();
//! assert_eq!(system.dim(), 1);
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::averaging::{
    average_diffusion_gap, average_drift, average_operator, fit_decay_modulus,
    verify_contraction, AveragedSystem, AveragingError, ContractionReport, DecayModulus,
};
use crate::coefficients::{
    CoefficientError, CoefficientSystem, MatrixHarmonic, NonlinearTerm, RecurrenceClass,
    Saturation, TimeSignal, TimeVaryingOperator, VectorField,
};
use crate::flow::{
    fit_dichotomy, rescaled_gap, DichotomyCertificate, DichotomyPlan, FlowError,
    RescaledGapTable,
};
use crate::linalg::{hurwitz_check, LinalgError};
use crate::metrics::{
    comparability_probe, law_convergence_sweep, BetaProbe, ComparabilityReport, MetricsError,
};
use crate::sde::{coupled_deviation, SdeError};

/// Schema tag every scenario file must carry.
pub const SCHEMA: &str = "bogolyubov/1";

/// Files written by one [`Scenario::execute`] run, in write order.
pub const STAGE_FILES: [&str; 8] = [
    "averaging.csv",
    "dichotomy.csv",
    "contraction.csv",
    "rescaled_gap.csv",
    "deviation.csv",
    "beta_sweep.csv",
    "comparability.csv",
    "summary.txt",
];

pub use crate::sde::{RECORD_INTERVAL, STEP_FACTOR};

/// Base times over which averaging gaps are maximized.
const AVERAGING_BASE_TIMES: [f64; 3] = [0.0, 1.7, 3.9];

/// Absolute level below which a mean-square diffusion gap counts as zero
/// regardless of the relative envelope test (quadrature noise floor).
const DIFFUSION_GAP_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema {found:?}; this build reads {SCHEMA:?}")]
    Schema { found: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ScenarioError> {
    let n = rows.len();
    if n == 0 {
        return Err(ScenarioError::Invalid(format!("{what}: matrix is empty")));
    }
    let m = rows[0].len();
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(ScenarioError::Invalid(format!(
            "{what}: rows must be nonempty and of equal length"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(n, m, &flat))
}

/// One matrix harmonic of the operator; omitted blocks default to zero.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixHarmonicSpec {
    pub freq: f64,
    #[serde(default)]
    pub cos: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sin: Option<Vec<Vec<f64>>>,
}

/// Matrix transient `coef * exp(-rate |t|)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDecaySpec {
    pub coef: Vec<Vec<f64>>,
    pub rate: f64,
}

/// Time-varying operator declaration: matrices are written row by row.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub base: Vec<Vec<f64>>,
    #[serde(default)]
    pub harmonics: Vec<MatrixHarmonicSpec>,
    #[serde(default)]
    pub decay: Option<MatrixDecaySpec>,
}

impl OperatorSpec {
    fn build(&self, what: &str) -> Result<TimeVaryingOperator, ScenarioError> {
        let base = matrix_from_rows(&self.base, &format!("{what}.base"))?;
        let d = base.nrows();
        let harmonics = self
            .harmonics
            .iter()
            .map(|h| -> Result<MatrixHarmonic, ScenarioError> {
                let cos = match &h.cos {
                    Some(rows) => matrix_from_rows(rows, &format!("{what}.harmonics.cos"))?,
                    None => DMatrix::zeros(d, d),
                };
                let sin = match &h.sin {
                    Some(rows) => matrix_from_rows(rows, &format!("{what}.harmonics.sin"))?,
                    None => DMatrix::zeros(d, d),
                };
                Ok(MatrixHarmonic { freq: h.freq, cos, sin })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let decay = self
            .decay
            .as_ref()
            .map(|spec| -> Result<(DMatrix<f64>, f64), ScenarioError> {
                Ok((matrix_from_rows(&spec.coef, &format!("{what}.decay"))?, spec.rate))
            })
            .transpose()?;
        Ok(TimeVaryingOperator::new(base, harmonics, decay)?)
    }
}

/// One saturated nonlinearity `amplitude * time(t) * sigma(x)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSpec {
    pub amplitude: f64,
    #[serde(default = "unit_signal")]
    pub time: TimeSignal,
    pub saturation: Saturation,
}

fn unit_signal() -> TimeSignal {
    TimeSignal::constant(1.0)
}

/// A vector field declaration.  Fields that are plain offsets with
/// closed-form bounds derive their certificates; anything state-dependent
/// or containing a Levitan term must declare `bound` and `lipschitz`
/// explicitly.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub offset: Vec<TimeSignal>,
    #[serde(default)]
    pub linear: Option<OperatorSpec>,
    #[serde(default)]
    pub nonlinear: Vec<NonlinearSpec>,
    #[serde(default)]
    pub bound: Option<f64>,
    #[serde(default)]
    pub lipschitz: Option<f64>,
}

impl FieldSpec {
    fn build(&self, what: &str) -> Result<VectorField, ScenarioError> {
        let offset = self.offset.clone();
        let linear = self
            .linear
            .as_ref()
            .map(|s| s.build(&format!("{what}.linear")))
            .transpose()?;
        let nonlinear: Vec<NonlinearTerm> = self
            .nonlinear
            .iter()
            .map(|n| NonlinearTerm {
                amplitude: n.amplitude,
                time: n.time.clone(),
                saturation: n.saturation,
            })
            .collect();
        match (self.bound, self.lipschitz) {
            (Some(b), Some(l)) => Ok(VectorField::new(offset, linear, nonlinear, b, l)?),
            (None, None) if linear.is_none() && nonlinear.is_empty() => {
                Ok(VectorField::autonomous_offset(offset)?)
            }
            _ => Err(ScenarioError::Invalid(format!(
                "{what}: state-dependent fields need both bound and lipschitz certificates"
            ))),
        }
    }
}

/// The coefficient system block.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub eps0: f64,
    pub recurrence: RecurrenceClass,
    pub operator: OperatorSpec,
    pub drift: FieldSpec,
    pub diffusion: FieldSpec,
}

impl SystemSpec {
    fn build(&self) -> Result<CoefficientSystem, ScenarioError> {
        let operator = self.operator.build("system.operator")?;
        let drift = self.drift.build("system.drift")?;
        let diffusion = self.diffusion.build("system.diffusion")?;
        Ok(CoefficientSystem::new(
            operator,
            drift,
            diffusion,
            self.recurrence.clone(),
            self.eps0,
        )?)
    }
}

fn default_seed() -> u64 {
    7
}
fn default_paths() -> usize {
    400
}
fn default_gamma_fraction() -> f64 {
    0.5
}
fn default_windows() -> Vec<f64> {
    vec![5.0, 10.0, 20.0, 40.0, 80.0, 160.0, 320.0, 640.0, 1280.0]
}
fn default_directions() -> usize {
    16
}
fn default_shuffles() -> usize {
    5
}
fn default_certificate_samples() -> u64 {
    20_000
}

/// Run parameters: the time scales to sweep, where to probe laws, and the
/// Monte Carlo budget.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Time scales, each in `(0, eps0]`.
    pub epsilons: Vec<f64>,
    /// Times (in the compressed clock) at which laws are compared.
    pub probe_times: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    /// Simulation horizon; defaults to the largest probe time.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Weight rate of the rescaled-gap scan, as a fraction of the
    /// averaged decay rate.
    #[serde(default = "default_gamma_fraction")]
    pub gamma_fraction: f64,
    /// Window lengths of the averaging scan, ascending.
    #[serde(default = "default_windows")]
    pub averaging_windows: Vec<f64>,
    /// Random projection directions for law distances above dimension 1.
    #[serde(default = "default_directions")]
    pub directions: usize,
    /// Split-half shuffles behind each noise floor.
    #[serde(default = "default_shuffles")]
    pub shuffles: usize,
    /// Monte Carlo samples of the certificate audit.
    #[serde(default = "default_certificate_samples")]
    pub certificate_samples: u64,
    /// Override of the largest separation probed by the dichotomy fit.
    #[serde(default)]
    pub max_separation: Option<f64>,
}

/// Declared outcomes; the run compares these with what it observes.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Expectations {
    /// Finite-window averaging gaps of the operator and drift decay to
    /// under 1% of their head value within the scanned windows.
    pub averaging_vanishes: bool,
    /// The averaged system needed a window-relative average (Levitan).
    pub window_relative: bool,
    /// The mean-square diffusion gap vanishes.
    pub diffusion_averageable: bool,
    /// The dichotomy and Lipschitz certificates admit a unique bounded
    /// solution.
    pub unique_bounded: bool,
    /// The law distance at the finest time scale is within floor of the
    /// coarsest one at the last probe time.
    pub law_convergence: bool,
    /// Law distances stay under the fitted multiple of pathwise
    /// deviations plus twice the floor.
    pub comparable: bool,
}

impl Default for Expectations {
    fn default() -> Self {
        Expectations {
            averaging_vanishes: true,
            window_relative: false,
            diffusion_averageable: true,
            unique_bounded: true,
            law_convergence: true,
            comparable: true,
        }
    }
}

/// A parsed scenario file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub system: SystemSpec,
    pub run: RunSpec,
    #[serde(default)]
    pub expectations: Expectations,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: &Path) -> Result<Scenario, ScenarioError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Structural checks beyond parsing; rerun after mutating run
    /// parameters (the CLI overrides seed, paths and time scales).
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA {
            return Err(ScenarioError::Schema {
                found: self.schema.clone(),
            });
        }
        let invalid = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return invalid("name must be a nonempty slug of [A-Za-z0-9_-]".to_string());
        }
        let r = &self.run;
        if r.epsilons.is_empty() {
            return invalid("run.epsilons must name at least one time scale".to_string());
        }
        for &e in &r.epsilons {
            if !(e.is_finite() && e > 0.0 && e <= self.system.eps0) {
                return invalid(format!(
                    "run.epsilons entry {e} is outside (0, eps0 = {}]",
                    self.system.eps0
                ));
            }
        }
        if r.probe_times.is_empty()
            || r.probe_times.iter().any(|t| !(t.is_finite() && *t >= 0.0))
        {
            return invalid("run.probe_times must be nonempty, finite, nonnegative".to_string());
        }
        if r.n_paths < 2 {
            return invalid("run.n_paths must be at least 2".to_string());
        }
        if !(r.gamma_fraction > 0.0 && r.gamma_fraction < 1.0) {
            return invalid("run.gamma_fraction must lie strictly between 0 and 1".to_string());
        }
        if r.averaging_windows.is_empty()
            || r.averaging_windows.iter().any(|w| !(w.is_finite() && *w > 0.0))
        {
            return invalid("run.averaging_windows must be positive and nonempty".to_string());
        }
        if r.directions == 0 || r.shuffles == 0 {
            return invalid("run.directions and run.shuffles must be at least 1".to_string());
        }
        if let Some(h) = r.horizon {
            let t_max = r.probe_times.iter().copied().fold(0.0_f64, f64::max);
            if !(h.is_finite() && h >= t_max) {
                return invalid(format!(
                    "run.horizon {h} must cover the largest probe time {t_max}"
                ));
            }
        }
        Ok(())
    }

    pub fn build_system(&self) -> Result<CoefficientSystem, ScenarioError> {
        self.system.build()
    }

    /// Recording horizon: the declared one, or the largest probe time.
    pub fn horizon(&self) -> f64 {
        self.run.horizon.unwrap_or_else(|| {
            self.run
                .probe_times
                .iter()
                .copied()
                .fold(0.0_f64, f64::max)
                .max(RECORD_INTERVAL)
        })
    }

    /// Coarse-to-fine deduplicated time scales: the file order is
    /// irrelevant, the artifacts are always written largest first.
    pub fn sorted_epsilons(&self) -> Vec<f64> {
        let mut eps = self.run.epsilons.clone();
        eps.sort_by(|a, b| b.total_cmp(a));
        eps.dedup();
        eps
    }

    /// Run every stage on this scenario and write the artifacts listed in
    /// [`STAGE_FILES`] into `out_dir` (created if missing).
    pub fn execute(&self, out_dir: &Path) -> Result<ScenarioOutcome, ScenarioError> {
        fs::create_dir_all(out_dir)?;
        let sys = self.build_system()?;
        let avg = AveragedSystem::from_system(&sys)?;
        let mut files: Vec<PathBuf> = Vec::new();
        let mut lines: Vec<String> = Vec::new();
        lines.push(format!("scenario: {}", self.name));
        if !self.description.is_empty() {
            lines.push(format!("description: {}", self.description));
        }
        lines.push(format!("schema: {SCHEMA}"));
        lines.push(format!("dimension: {}", sys.dim()));
        lines.push(format!("recurrence: {}", sys.recurrence));
        lines.push(format!("eps0: {}", sys.eps0));

        let (drift_audit, diffusion_audit) =
            sys.verify_certificates(self.run.certificate_samples, self.run.seed)?;
        lines.push(format!(
            "[certificates] drift worst bound ratio {:.3}, worst lipschitz ratio {:.3} \
             ({} samples)",
            drift_audit.worst_bound_ratio, drift_audit.worst_lipschitz_ratio, drift_audit.samples
        ));
        lines.push(format!(
            "[certificates] diffusion worst bound ratio {:.3}, worst lipschitz ratio {:.3} \
             ({} samples)",
            diffusion_audit.worst_bound_ratio,
            diffusion_audit.worst_lipschitz_ratio,
            diffusion_audit.samples
        ));

        let scan = self.stage_averaging(&sys, &avg)?;
        write_stage(out_dir, "averaging.csv", &scan.csv, &mut files)?;
        let averaging_vanishes = scan.operator.vanishing && scan.drift.vanishing;
        let diffusion_averageable =
            scan.diffusion.vanishing || scan.diffusion.tail() <= DIFFUSION_GAP_FLOOR;
        lines.push(format!(
            "[averaging] operator gap tail {:.3e} (vanishing: {}), drift gap tail {:.3e} \
             (vanishing: {}), diffusion mean-square gap tail {:.3e}",
            scan.operator.tail(),
            scan.operator.vanishing,
            scan.drift.tail(),
            scan.drift.vanishing,
            scan.diffusion.tail(),
        ));
        if avg.window_relative {
            lines.push(
                "[averaging] a Levitan term forced a window-relative average".to_string(),
            );
        }

        let mut plan = DichotomyPlan::default();
        if let Some(ms) = self.run.max_separation {
            plan.max_separation = ms;
        }
        let cert = fit_dichotomy(&sys.operator, &plan)?;
        let dichotomy_csv = format!(
            "n,nu,binding_separation,sample_count\n{:.12e},{:.12e},{:.12e},{}\n",
            cert.n, cert.nu, cert.binding_separation, cert.sample_count
        );
        write_stage(out_dir, "dichotomy.csv", &dichotomy_csv, &mut files)?;
        lines.push(format!(
            "[dichotomy] n = {:.4}, nu = {:.4}, binding separation {:.2}, {} samples",
            cert.n, cert.nu, cert.binding_separation, cert.sample_count
        ));

        let bound = sys
            .drift
            .bound_certificate()
            .max(sys.diffusion.bound_certificate());
        let lipschitz = sys
            .drift
            .lipschitz_certificate()
            .max(sys.diffusion.lipschitz_certificate());
        let contraction = verify_contraction(cert.n, cert.nu, bound, lipschitz);
        let contraction_csv = format!(
            "n,nu,bound,lipschitz,unique_bounded,compatible_in_distribution,\
             convergence_margin,radius\n{:.12e},{:.12e},{:.12e},{:.12e},{},{},{},{}\n",
            contraction.n,
            contraction.nu,
            contraction.bound,
            contraction.lipschitz,
            contraction.unique_bounded,
            contraction.compatible_in_distribution,
            contraction.convergence_margin,
            contraction
                .radius
                .map(|r| format!("{r:.12e}"))
                .unwrap_or_default(),
        );
        write_stage(out_dir, "contraction.csv", &contraction_csv, &mut files)?;
        lines.push(format!(
            "[contraction] unique bounded: {}, compatible in distribution: {}, \
             convergence margin: {}, radius: {}",
            contraction.unique_bounded,
            contraction.compatible_in_distribution,
            contraction.convergence_margin,
            contraction
                .radius
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "none".to_string()),
        ));

        let (gap_csv, gap_line) = self.stage_rescaled_gap(&sys, &avg)?;
        write_stage(out_dir, "rescaled_gap.csv", &gap_csv, &mut files)?;
        lines.push(gap_line);

        let mc = if contraction.unique_bounded {
            Some(self.stage_monte_carlo(&sys, &avg, &cert)?)
        } else {
            None
        };
        match &mc {
            Some(stage) => {
                write_stage(out_dir, "deviation.csv", &stage.deviation_csv, &mut files)?;
                write_stage(out_dir, "beta_sweep.csv", &stage.sweep_csv, &mut files)?;
                write_stage(
                    out_dir,
                    "comparability.csv",
                    &stage.comparability_csv,
                    &mut files,
                )?;
                lines.extend(stage.lines.iter().cloned());
            }
            None => {
                write_stage(out_dir, "deviation.csv", DEVIATION_HEADER, &mut files)?;
                write_stage(out_dir, "beta_sweep.csv", BETA_HEADER, &mut files)?;
                write_stage(out_dir, "comparability.csv", COMPARABILITY_HEADER, &mut files)?;
                lines.push(
                    "[deviation] skipped: no unique-bounded-solution certificate".to_string(),
                );
            }
        }

        let observed = Observed {
            averaging_vanishes: Some(averaging_vanishes),
            window_relative: Some(avg.window_relative),
            diffusion_averageable: Some(diffusion_averageable),
            unique_bounded: Some(contraction.unique_bounded),
            law_convergence: mc.as_ref().and_then(|s| s.law_convergence),
            comparable: mc.as_ref().map(|s| s.comparability.pass),
        };
        let mismatches = observed.mismatches(&self.expectations);
        lines.push("expectations:".to_string());
        for line in observed.report(&self.expectations) {
            lines.push(format!("  {line}"));
        }
        let pass = mismatches.is_empty();
        lines.push(format!("verdict: {}", if pass { "PASS" } else { "FAIL" }));

        let summary = lines.join("\n") + "\n";
        write_stage(out_dir, "summary.txt", &summary, &mut files)?;
        Ok(ScenarioOutcome {
            name: self.name.clone(),
            pass,
            mismatches,
            certificate: cert,
            contraction,
            files,
            summary,
        })
    }

    fn stage_averaging(
        &self,
        sys: &CoefficientSystem,
        avg: &AveragedSystem,
    ) -> Result<AveragingScan, ScenarioError> {
        let d = sys.dim();
        let probes = [
            DVector::<f64>::zeros(d),
            DVector::<f64>::from_element(d, 1.0 / (d as f64).sqrt()),
        ];
        let mut windows = self.run.averaging_windows.clone();
        windows.sort_by(f64::total_cmp);
        windows.dedup();
        let mut csv = String::from("window,operator_gap,drift_gap,diffusion_gap\n");
        let mut op_samples = Vec::with_capacity(windows.len());
        let mut drift_samples = Vec::with_capacity(windows.len());
        let mut diff_samples = Vec::with_capacity(windows.len());
        for &len in &windows {
            let mut op_gap = 0.0_f64;
            let mut drift_gap = 0.0_f64;
            let mut diff_gap = 0.0_f64;
            for &t in &AVERAGING_BASE_TIMES {
                let am = average_operator(&sys.operator, len, t)?;
                op_gap = op_gap.max((am - &avg.a_bar).norm());
                for x in &probes {
                    let fm = average_drift(&sys.drift, x, len, t)?;
                    drift_gap = drift_gap.max((fm - avg.f_bar.at(0.0, x)).norm());
                    diff_gap =
                        diff_gap.max(average_diffusion_gap(&sys.diffusion, &avg.g_bar, x, len, t)?);
                }
            }
            csv.push_str(&format!(
                "{len:.12e},{op_gap:.12e},{drift_gap:.12e},{diff_gap:.12e}\n"
            ));
            op_samples.push((len, op_gap));
            drift_samples.push((len, drift_gap));
            diff_samples.push((len, diff_gap));
        }
        Ok(AveragingScan {
            csv,
            operator: fit_decay_modulus(&op_samples)?,
            drift: fit_decay_modulus(&drift_samples)?,
            diffusion: fit_decay_modulus(&diff_samples)?,
        })
    }

    fn stage_rescaled_gap(
        &self,
        sys: &CoefficientSystem,
        avg: &AveragedSystem,
    ) -> Result<(String, String), ScenarioError> {
        let (hurwitz, abscissa) = hurwitz_check(&avg.a_bar)?;
        if !hurwitz {
            return Err(ScenarioError::Invalid(format!(
                "hurwitz_check failed: averaged operator has spectral abscissa \
                 {abscissa:.6} >= 0; the flow comparison needs a stable averaged system"
            )));
        }
        let gamma0 = self.run.gamma_fraction * (-abscissa);
        let mut table = RescaledGapTable::default();
        let mut csv = String::from("epsilon,gamma0,n_eps,witness_t,witness_tau\n");
        for &eps in &self.sorted_epsilons() {
            let row = rescaled_gap(&sys.operator, &avg.a_bar, eps, gamma0)?;
            csv.push_str(&format!(
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                row.epsilon, row.gamma0, row.n_eps, row.witness_t, row.witness_tau
            ));
            table.push(row);
        }
        let line = format!(
            "[rescaled_gap] gamma0 = {:.4}, observed order {}, fine/coarse ratio {}",
            gamma0,
            table
                .alpha_observed()
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "n/a".to_string()),
            table
                .decay_ratio()
                .map(|r| format!("{r:.3}"))
                .unwrap_or_else(|| "n/a".to_string()),
        );
        Ok((csv, line))
    }

    fn stage_monte_carlo(
        &self,
        sys: &CoefficientSystem,
        avg: &AveragedSystem,
        cert: &DichotomyCertificate,
    ) -> Result<McStage, ScenarioError> {
        let probe = BetaProbe {
            directions: self.run.directions,
            shuffles: self.run.shuffles,
            seed: self.run.seed,
        };
        let horizon = self.horizon();
        let epsilons = self.sorted_epsilons();
        let mut deviation_csv = String::from(DEVIATION_HEADER);
        let mut deviations: Vec<f64> = Vec::new();
        let mut lines: Vec<String> = Vec::new();
        for &eps in &epsilons {
            let dt = STEP_FACTOR * eps;
            let stride = (RECORD_INTERVAL / dt).round().max(1.0) as usize;
            let run = coupled_deviation(
                sys,
                avg,
                eps,
                cert,
                horizon,
                dt,
                stride,
                self.run.n_paths,
                self.run.seed,
            )?;
            let stats = run.statistics()?;
            let terminal_state = *stats.rms_state.last().unwrap_or(&f64::NAN);
            deviation_csv.push_str(&format!(
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                eps,
                dt,
                run.burn_in.duration,
                run.burn_in.bias_bound,
                stats.sup_rms_deviation,
                stats.terminal_rms_deviation,
                terminal_state,
            ));
            lines.push(format!(
                "[deviation] eps = {:.4}: sup rms {:.4e}, terminal rms {:.4e} \
                 ({} paths, burn-in {:.2})",
                eps,
                stats.sup_rms_deviation,
                stats.terminal_rms_deviation,
                self.run.n_paths,
                run.burn_in.duration,
            ));
            let times = run.rescaled.times();
            for &t in &self.run.probe_times {
                let k = (0..times.len())
                    .min_by(|&i, &j| (times[i] - t).abs().total_cmp(&(times[j] - t).abs()))
                    .expect("recorded grid is nonempty");
                deviations.push(run.rescaled.rms_deviation_from(&run.averaged, k)?);
            }
        }
        // Law distances are measured on independently driven ensembles;
        // the coupled run above only feeds the pathwise column.
        let sweep = law_convergence_sweep(
            sys,
            avg,
            cert,
            &epsilons,
            &self.run.probe_times,
            self.run.n_paths,
            &probe,
        )?;
        let mut buf = Vec::new();
        sweep.write_csv(&mut buf)?;
        let sweep_csv = String::from_utf8(buf).expect("csv output is ascii");

        let t_last = self
            .run
            .probe_times
            .iter()
            .copied()
            .fold(0.0_f64, f64::max);
        let law_convergence = sweep.extremes_at(t_last).map(|(coarse, fine)| {
            lines.push(format!(
                "[beta] at t = {:.2}: eps {:.4} gives {:.4e}, eps {:.4} gives {:.4e} \
                 (floor {:.4e})",
                t_last, coarse.epsilon, coarse.beta, fine.epsilon, fine.beta, fine.noise_floor
            ));
            fine.beta <= coarse.beta + fine.noise_floor + 1e-9
        });

        debug_assert_eq!(deviations.len(), sweep.rows.len());
        let triples: Vec<(f64, f64, f64)> = deviations
            .iter()
            .zip(sweep.rows.iter())
            .map(|(&dev, row)| (dev, row.beta, row.noise_floor))
            .collect();
        let comparability = comparability_probe(&triples)?;
        let mut comparability_csv = String::from(COMPARABILITY_HEADER);
        for (cell, row) in sweep.rows.iter().zip(comparability.rows.iter()) {
            comparability_csv.push_str(&format!(
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}\n",
                cell.epsilon, cell.t, row.deviation, row.beta, row.noise_floor, row.within
            ));
        }
        lines.push(format!(
            "[comparability] scale {:.4}, pass: {}",
            comparability.scale, comparability.pass
        ));
        Ok(McStage {
            deviation_csv,
            sweep_csv,
            comparability,
            comparability_csv,
            law_convergence,
            lines,
        })
    }
}

const DEVIATION_HEADER: &str = "epsilon,dt,burn_in,bias_bound,sup_rms_deviation,\
terminal_rms_deviation,terminal_rms_state\n";
const BETA_HEADER: &str = "epsilon,t,beta,noise_floor,n_samples\n";
const COMPARABILITY_HEADER: &str = "epsilon,t,deviation,beta,noise_floor,within\n";

fn write_stage(
    dir: &Path,
    name: &str,
    contents: &str,
    files: &mut Vec<PathBuf>,
) -> Result<(), ScenarioError> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    files.push(path);
    Ok(())
}

struct AveragingScan {
    csv: String,
    operator: DecayModulus,
    drift: DecayModulus,
    diffusion: DecayModulus,
}

struct McStage {
    deviation_csv: String,
    sweep_csv: String,
    comparability: ComparabilityReport,
    comparability_csv: String,
    /// None when only one time scale was swept.
    law_convergence: Option<bool>,
    lines: Vec<String>,
}

/// What the run actually observed; `None` marks stages that never ran or
/// had too little data to judge.
#[derive(Debug, Clone)]
struct Observed {
    averaging_vanishes: Option<bool>,
    window_relative: Option<bool>,
    diffusion_averageable: Option<bool>,
    unique_bounded: Option<bool>,
    law_convergence: Option<bool>,
    comparable: Option<bool>,
}

impl Observed {
    fn fields(&self) -> [(&'static str, Option<bool>); 6] {
        [
            ("averaging_vanishes", self.averaging_vanishes),
            ("window_relative", self.window_relative),
            ("diffusion_averageable", self.diffusion_averageable),
            ("unique_bounded", self.unique_bounded),
            ("law_convergence", self.law_convergence),
            ("comparable", self.comparable),
        ]
    }

    /// An expectation mismatches when the observation disagrees, or when
    /// a `true` expectation could not be assessed at all.
    fn mismatches(&self, expected: &Expectations) -> Vec<String> {
        let want = [
            expected.averaging_vanishes,
            expected.window_relative,
            expected.diffusion_averageable,
            expected.unique_bounded,
            expected.law_convergence,
            expected.comparable,
        ];
        self.fields()
            .iter()
            .zip(want)
            .filter_map(|((name, got), want)| match got {
                Some(got) if *got == want => None,
                Some(got) => Some(format!("{name}: expected {want}, observed {got}")),
                None if want => Some(format!("{name}: expected true, not assessed")),
                None => None,
            })
            .collect()
    }

    fn report(&self, expected: &Expectations) -> Vec<String> {
        let want = [
            expected.averaging_vanishes,
            expected.window_relative,
            expected.diffusion_averageable,
            expected.unique_bounded,
            expected.law_convergence,
            expected.comparable,
        ];
        self.fields()
            .iter()
            .zip(want)
            .map(|((name, got), want)| {
                let (shown, ok) = match got {
                    Some(got) => (got.to_string(), *got == want),
                    None => ("not assessed".to_string(), !want),
                };
                format!(
                    "{name}: expected {want}, observed {shown}  {}",
                    if ok { "MATCH" } else { "MISMATCH" }
                )
            })
            .collect()
    }
}

/// Result of one full scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub name: String,
    /// True when every declared expectation matched.
    pub pass: bool,
    pub mismatches: Vec<String>,
    pub certificate: DichotomyCertificate,
    pub contraction: ContractionReport,
    /// Artifacts written, in [`STAGE_FILES`] order.
    pub files: Vec<PathBuf>,
    pub summary: String,
}
