//! Command-line driver: execute scenario files, sweep law distances,
//! re-read finished run directories.
//!
//! Exit codes: 0 success (and, for `run`, every expectation matched),
//! 2 validation failure (unreadable, unparsable or invalid scenario,
//! violated certificates, contraction hypothesis failures), 3 numerical
//! failure inside a stage (divergence, step-size or quadrature trouble),
//! 4 acceptance failure (an expectation mismatched or a FAIL verdict).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bogolyubov::averaging::{verify_contraction, AveragedSystem, ContractionReport};
use bogolyubov::flow::{fit_dichotomy, DichotomyPlan};
use bogolyubov::metrics::{law_convergence_sweep, BetaProbe};
use bogolyubov::scenario::{
    Scenario, ScenarioError, RECORD_INTERVAL, STAGE_FILES, STEP_FACTOR,
};
use bogolyubov::sde::coupled_deviation;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "bogolyubov",
    version,
    about = "Averaging diagnostics for semilinear stochastic systems with recurrent coefficients",
    long_about = "Runs the staged verification pipeline described by a scenario file: \
                  certificate audit, averaging scan, dichotomy fit, contraction check, \
                  rescaled flow gap, coupled deviations, law distances, comparability."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Cap the worker thread count (0 keeps the library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every stage of a scenario and write one artifact per stage.
    Run(RunArgs),
    /// Convergence table only: how fast the coupled runs approach each
    /// other as the time scale shrinks.
    Sweep(SweepArgs),
    /// Verify a finished run directory and print its summary again.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Directory for the stage artifacts (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario's Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario TOML file (provides the system and defaults).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated time scales replacing the scenario's list.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    /// Write the sweep table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by a previous `run`.
    #[arg(long)]
    dir: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

fn validation_failure(err: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: err.to_string(),
    }
}

fn numerical_failure(err: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_NUMERICAL,
        message: err.to_string(),
    }
}

/// Classify an error escaping a staged run: schema, certificate and
/// hypothesis problems are validation failures, everything else is a
/// numerical stage failure.
fn stage_failure(err: ScenarioError) -> Failure {
    let code = match &err {
        ScenarioError::Parse(_)
        | ScenarioError::Schema { .. }
        | ScenarioError::Invalid(_)
        | ScenarioError::Coefficient(_) => EXIT_VALIDATION,
        _ => EXIT_NUMERICAL,
    };
    Failure {
        code,
        message: err.to_string(),
    }
}

/// The smallness hypothesis the contraction check enforces, spelled out
/// for error messages.
fn contraction_violation(report: &ContractionReport) -> String {
    let cap = report.nu / (report.n * (2.0 + report.nu).sqrt());
    format!(
        "contraction hypothesis violated: lipschitz certificate {:.6} is not below \
         nu / (n * sqrt(2 + nu)) = {:.6} (n = {:.4}, nu = {:.4})",
        report.lipschitz, cap, report.n, report.nu
    )
}

fn load(config: &Path, seed: Option<u64>, paths: Option<usize>) -> Result<Scenario, Failure> {
    let mut scenario = Scenario::from_path(config).map_err(validation_failure)?;
    if let Some(seed) = seed {
        scenario.run.seed = seed;
    }
    if let Some(paths) = paths {
        scenario.run.n_paths = paths;
    }
    scenario.validate().map_err(validation_failure)?;
    Ok(scenario)
}

fn run(args: RunArgs) -> Result<u8, Failure> {
    let scenario = load(&args.config, args.seed, args.paths)?;
    let outcome = scenario.execute(&args.out).map_err(stage_failure)?;
    print!("{}", outcome.summary);
    println!(
        "wrote {} artifacts to {}",
        outcome.files.len(),
        args.out.display()
    );
    if outcome.pass {
        return Ok(0);
    }
    for m in &outcome.mismatches {
        eprintln!("mismatch: {m}");
    }
    if scenario.expectations.unique_bounded && !outcome.contraction.unique_bounded {
        eprintln!("error: {}", contraction_violation(&outcome.contraction));
        return Ok(EXIT_VALIDATION);
    }
    Ok(EXIT_ACCEPTANCE)
}

/// One line of the sweep table: worst-grid second moment of the coupled
/// difference with its standard error, and the worst probed law distance
/// with the matching resampling floor.
struct SweepRow {
    epsilon: f64,
    sup_l2: f64,
    se: f64,
    sup_beta: f64,
    floor: f64,
}

fn sweep_table(scenario: &Scenario) -> Result<Vec<SweepRow>, Failure> {
    let sys = scenario.build_system().map_err(validation_failure)?;
    let avg = AveragedSystem::from_system(&sys).map_err(numerical_failure)?;
    let mut plan = DichotomyPlan::default();
    if let Some(ms) = scenario.run.max_separation {
        plan.max_separation = ms;
    }
    let cert = fit_dichotomy(&sys.operator, &plan).map_err(numerical_failure)?;
    eprintln!(
        "fitted dichotomy: n = {:.4}, nu = {:.4} ({} samples)",
        cert.n, cert.nu, cert.sample_count
    );
    let bound = sys
        .drift
        .bound_certificate()
        .max(sys.diffusion.bound_certificate());
    let lipschitz = sys
        .drift
        .lipschitz_certificate()
        .max(sys.diffusion.lipschitz_certificate());
    let contraction = verify_contraction(cert.n, cert.nu, bound, lipschitz);
    if !contraction.unique_bounded {
        return Err(validation_failure(contraction_violation(&contraction)));
    }
    let probe = BetaProbe {
        directions: scenario.run.directions,
        shuffles: scenario.run.shuffles,
        seed: scenario.run.seed,
    };
    let horizon = scenario.horizon();
    let epsilons = scenario.sorted_epsilons();
    // Law distances come from independently driven ensembles; the
    // coupled run below only measures the pathwise deviation.
    let law_rows = law_convergence_sweep(
        &sys,
        &avg,
        &cert,
        &epsilons,
        &scenario.run.probe_times,
        scenario.run.n_paths,
        &probe,
    )
    .map_err(numerical_failure)?
    .rows;
    let mut rows = Vec::new();
    for eps in epsilons {
        let dt = STEP_FACTOR * eps;
        let stride = (RECORD_INTERVAL / dt).round().max(1.0) as usize;
        let run = coupled_deviation(
            &sys,
            &avg,
            eps,
            &cert,
            horizon,
            dt,
            stride,
            scenario.run.n_paths,
            scenario.run.seed,
        )
        .map_err(numerical_failure)?;
        let stats = run.statistics().map_err(numerical_failure)?;
        let (argmax, sup_rms) = stats
            .rms_deviation
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("coupled runs record at least one time");
        let samples = run
            .rescaled
            .squared_deviations_from(&run.averaged, argmax)
            .map_err(numerical_failure)?;
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let (sup_beta, floor) = law_rows
            .iter()
            .filter(|r| r.epsilon == eps)
            .max_by(|a, b| a.beta.total_cmp(&b.beta))
            .map(|r| (r.beta, r.noise_floor))
            .expect("law sweep covers every time scale");
        rows.push(SweepRow {
            epsilon: eps,
            sup_l2: sup_rms * sup_rms,
            se,
            sup_beta,
            floor,
        });
    }
    Ok(rows)
}

fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("epsilon,sup_l2_deviation,se,sup_beta,noise_floor\n");
    for r in rows {
        out.push_str(&format!(
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            r.epsilon, r.sup_l2, r.se, r.sup_beta, r.floor
        ));
    }
    if rows.len() > 1 {
        let decreasing = |f: fn(&SweepRow) -> f64| rows.windows(2).all(|w| f(&w[1]) < f(&w[0]));
        out.push_str(&format!(
            "# sup_l2_deviation decreasing: {}\n# sup_beta decreasing: {}\n",
            if decreasing(|r| r.sup_l2) { "yes" } else { "no" },
            if decreasing(|r| r.sup_beta) { "yes" } else { "no" },
        ));
    }
    out
}

fn sweep(args: SweepArgs) -> Result<u8, Failure> {
    let mut scenario = load(&args.config, args.seed, args.paths)?;
    if !args.eps.is_empty() {
        scenario.run.epsilons = args.eps;
        scenario.validate().map_err(validation_failure)?;
    }
    let rows = sweep_table(&scenario)?;
    let table = render_sweep(&rows);
    match args.out {
        Some(path) => {
            std::fs::write(&path, &table).map_err(numerical_failure)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{table}"),
    }
    Ok(0)
}

fn report(args: ReportArgs) -> Result<u8, Failure> {
    let missing: Vec<&str> = STAGE_FILES
        .iter()
        .copied()
        .filter(|name| !args.dir.join(name).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Failure {
            code: EXIT_VALIDATION,
            message: format!(
                "{} is not a complete run directory, missing: {}",
                args.dir.display(),
                missing.join(", ")
            ),
        });
    }
    let summary =
        std::fs::read_to_string(args.dir.join("summary.txt")).map_err(numerical_failure)?;
    print!("{summary}");
    if summary.lines().any(|l| l == "verdict: PASS") {
        Ok(0)
    } else {
        Ok(EXIT_ACCEPTANCE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_NUMERICAL);
        }
    }
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Sweep(args) => sweep(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
