use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use smd_npml::harness::{
    emit_report, run_experiment, thread_count, with_pool, ExperimentConfig, ExperimentKind,
    JRule, ModelConfig, RunReport, SCHEMA_VERSION,
};
use smd_npml::npml::{default_dimension, fit_npml};
use smd_npml::smd::{k_schedule, minimize_smd, KMode, MinimizeOptions, SimulatedObjective};
use smd_npml::simulate::{stream_rng, StreamPurpose};
use smd_npml::families::family_by_name;
use smd_npml::{AuxiliaryModel, FitOptions, Interval, QuadratureRule, Sample};

#[derive(Parser)]
#[command(
    name = "smd-npml",
    version,
    about = "Constrained density estimation and simulation-based minimum-distance inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the constrained density estimate to a data file.
    FitNpml {
        /// Sample file: one point per line, decimal.
        #[arg(long)]
        data: PathBuf,
        /// Model JSON: interval plus t, zeta, d, j, grid.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One simulation-based minimum-distance estimation from a data file.
    EstimateSmd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte Carlo: fit-error decay across the sample-size ladder.
    McRates(McArgs),
    /// Monte Carlo: asymptotic normality of the estimator (in- or out-of-family truth).
    McNormality(McArgs),
    /// Monte Carlo: efficiency against the inverse information, plus the refinement study.
    McEfficiency(McArgs),
    /// Monte Carlo: plug-in versus empirical integral increments and score decay.
    McDonsker(McArgs),
    /// Monte Carlo: norm-boundary and uniqueness behavior of the fit.
    McSphere(McArgs),
    /// Quadrature identity check between curvature, score covariance, and information.
    FisherCheck(McArgs),
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides master_seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (the SMD_NPML_THREADS variable wins over this).
    #[arg(long)]
    threads: Option<usize>,
    /// Report directory (overrides the config's output path).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<bool, Box<dyn Error>> {
    match command {
        Command::FitNpml { data, model, out } => run_fit(&data, &model, &out),
        Command::EstimateSmd { config, out, seed } => run_estimate(&config, &out, seed),
        Command::McRates(args) => run_mc(&[ExperimentKind::Rates], args),
        Command::McNormality(args) => {
            run_mc(&[ExperimentKind::Normality, ExperimentKind::Misspec], args)
        }
        Command::McEfficiency(args) => run_mc(&[ExperimentKind::Efficiency], args),
        Command::McDonsker(args) => run_mc(&[ExperimentKind::Donsker], args),
        Command::McSphere(args) => run_mc(&[ExperimentKind::Sphere], args),
        Command::FisherCheck(args) => run_mc(&[ExperimentKind::FisherCheck], args),
    }
}

#[derive(Deserialize)]
struct FitModelFile {
    schema: u32,
    #[serde(default = "unit_interval")]
    interval: [f64; 2],
    #[serde(flatten)]
    model: ModelConfig,
}

fn unit_interval() -> [f64; 2] {
    [0.0, 1.0]
}

fn check_schema(schema: u32) -> Result<(), Box<dyn Error>> {
    if schema != SCHEMA_VERSION {
        return Err(format!("config schema {schema} not supported (expected {SCHEMA_VERSION})").into());
    }
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<f64>, Box<dyn Error>> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: f64 = line
            .parse()
            .map_err(|e| format!("{}:{}: {e}", path.display(), idx + 1))?;
        points.push(value);
    }
    if points.is_empty() {
        return Err(format!("{}: no sample points", path.display()).into());
    }
    Ok(points)
}

fn build_model(
    spec: &ModelConfig,
    interval: Interval,
    n: usize,
) -> Result<AuxiliaryModel, Box<dyn Error>> {
    let j = match spec.j {
        JRule::Auto => default_dimension(n, spec.t),
        JRule::Fixed(j) => j,
    };
    Ok(AuxiliaryModel::new(
        interval, spec.t, spec.zeta, spec.d, j, spec.grid,
    )?)
}

fn run_fit(data: &Path, model: &Path, out: &Path) -> Result<bool, Box<dyn Error>> {
    let file: FitModelFile = serde_json::from_str(&fs::read_to_string(model)?)?;
    check_schema(file.schema)?;
    let interval = Interval::new(file.interval[0], file.interval[1])?;
    let points = read_points(data)?;
    let n = points.len();
    let sample = Sample::new(interval, points)?;
    let model = build_model(&file.model, interval, n)?;
    let fit = fit_npml(&model, &sample, &FitOptions::default())?;
    let result = json!({
        "schema": SCHEMA_VERSION,
        "interval": file.interval,
        "model": { "t": file.model.t, "zeta": file.model.zeta, "d": file.model.d,
                   "j": model.dim(), "grid": file.model.grid },
        "n": n,
        "coefficients": fit.density.coeffs(),
        "loglik": fit.loglik,
        "sphere_residual": fit.sphere_residual,
        "kkt_residual": fit.kkt_residual,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "norm_t": fit.density.sobolev_norm(file.model.t)?,
        "grid_min": model.grid_min(&fit.density)?,
    });
    fs::write(out, format!("{}\n", serde_json::to_string_pretty(&result)?))?;
    println!(
        "fit: n = {n}, J = {}, loglik = {:.6}, converged = {}",
        model.dim(),
        fit.loglik,
        fit.converged
    );
    println!("wrote {}", out.display());
    Ok(fit.converged)
}

#[derive(Serialize, Deserialize)]
struct EstimateFile {
    schema: u32,
    family: String,
    #[serde(default = "unit_interval")]
    interval: [f64; 2],
    model: ModelConfig,
    /// Path to the sample file: one point per line, decimal.
    data: String,
    #[serde(default = "default_k_mode")]
    k_mode: KMode,
    #[serde(default = "default_k_constant")]
    k_constant: f64,
    /// Explicit draw count; wins over the schedule when set.
    #[serde(default)]
    k: Option<usize>,
    seed: u64,
    #[serde(default = "default_quad_nodes")]
    quad_nodes: usize,
}

fn default_k_mode() -> KMode {
    KMode::Quadratic
}

fn default_k_constant() -> f64 {
    1.0
}

fn default_quad_nodes() -> usize {
    256
}

fn run_estimate(config: &Path, out: &Path, seed: Option<u64>) -> Result<bool, Box<dyn Error>> {
    let mut file: EstimateFile = serde_json::from_str(&fs::read_to_string(config)?)?;
    check_schema(file.schema)?;
    if let Some(seed) = seed {
        file.seed = seed;
    }
    let interval = Interval::new(file.interval[0], file.interval[1])?;
    let family = family_by_name(&file.family, interval)?;
    if family.param_dim() == 0 {
        return Err(format!("family {} has no free parameters", file.family).into());
    }
    let points = read_points(Path::new(&file.data))?;
    let n = points.len();
    let sample = Sample::new(interval, points)?;
    let model = build_model(&file.model, interval, n)?;
    let fit = fit_npml(&model, &sample, &FitOptions::default())?;
    let quad = QuadratureRule::gauss_legendre(interval, file.quad_nodes)?;
    let k = match file.k {
        Some(k) => k,
        None => k_schedule(n, file.k_mode, file.model.t, file.k_constant)?,
    };
    let mut rng = stream_rng(file.seed, 0, 0, StreamPurpose::Simulation);
    let objective = SimulatedObjective::new(
        &family,
        &model,
        &fit.density,
        &quad,
        k,
        &mut rng,
        FitOptions::default(),
    )?;
    let result = minimize_smd(&objective, Some(n), &MinimizeOptions::default())?;
    let covariance: Option<Vec<f64>> = result
        .covariance
        .as_ref()
        .map(|c| c.iter().copied().collect());
    let output = json!({
        "schema": SCHEMA_VERSION,
        "theta_hat": result.theta_hat,
        "objective_value": result.objective_value,
        "covariance_row_major": covariance,
        "diagnostics": {
            "n": n,
            "k": k,
            "boundary": result.boundary,
            "converged": result.converged,
            "evaluations": result.evaluations,
            "inner_fits": objective.inner_fits(),
            "trace_len": result.trace.len(),
            "fit": {
                "loglik": fit.loglik,
                "sphere_residual": fit.sphere_residual,
                "kkt_residual": fit.kkt_residual,
                "iterations": fit.iterations,
                "converged": fit.converged,
            },
        },
        "config": file,
    });
    fs::write(out, format!("{}\n", serde_json::to_string_pretty(&output)?))?;
    println!(
        "estimate: θ̂ = {:?}, objective = {:.6e}, k = {k}",
        result.theta_hat, result.objective_value
    );
    println!("wrote {}", out.display());
    Ok(result.converged && !result.boundary)
}

fn run_mc(allowed: &[ExperimentKind], args: McArgs) -> Result<bool, Box<dyn Error>> {
    let mut cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if !allowed.contains(&cfg.experiment) {
        return Err(format!(
            "config experiment {:?} does not belong to this subcommand",
            cfg.experiment.name()
        )
        .into());
    }
    cfg.validate()?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let threads = thread_count(args.threads);
    let report: RunReport = with_pool(threads, || run_experiment(&cfg))?;
    print_report(&report);
    let (csv_path, json_path) = emit_report(&report, &out_dir)?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(report.passed())
}

fn print_report(report: &RunReport) {
    println!(
        "experiment {} — {} rows in {:.1}s",
        report.experiment,
        report.rows.len(),
        report.wall_seconds
    );
    for assertion in &report.assertions {
        let tag = if assertion.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", assertion.name, assertion.detail);
    }
}
