//! Command-line surface: argument parsing, JSON configs, artifact writing.
//!
//! Every command reads an optional JSON config (unknown keys rejected),
//! applies flag overrides, and writes fixed-name artifacts under `--out-dir`.
//! CSV artifacts start with `#` lines holding the command, seed and config;
//! JSON artifacts carry the same as `seed` and `config` fields.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{self, ObservationalDataset};
use crate::error::{CmgpError, Result};
use crate::eval::{self, BenchmarkConfig, CohortConfig};
use crate::inference::{self, fit_posterior};
use crate::kernel::{CmgpHyperparams, Coregionalization};
use crate::objective;
use crate::optimizer::{self, AdamSettings};
use crate::rng::derive_seed;

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "cmgp", version, about = "Individualized treatment effects with causal multi-task GPs")]
pub struct Cli {
    /// JSON config for the chosen command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Credible-interval coverage.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a selection-biased synthetic cohort (dataset.csv).
    Simulate,
    /// Fit hyperparameters and predict effects (theta.json, trace.csv, predictions.csv).
    Fit {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Extra covariate file to predict (predictions_extra.csv).
        #[arg(long)]
        predict: Option<PathBuf>,
        /// Start from (or, with --no-optimize, use) these hyperparameters.
        #[arg(long)]
        theta: Option<PathBuf>,
        #[arg(long)]
        no_optimize: bool,
    },
    /// Predict effects with saved hyperparameters (predictions.csv).
    Predict {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Score a fit against f0/f1 columns (report.json, predictions.csv).
    Evaluate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Credible-interval calibration under a known model (report.json).
    Coverage {
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Monte-Carlo comparison of CMGP and the naive GP (report.json, records.csv).
    Benchmark {
        #[arg(long)]
        replicates: Option<usize>,
        /// Also write plot.csv with per-point truth, estimate and interval.
        #[arg(long)]
        plot_data: bool,
    },
    /// Analytic vs finite-difference gradient table (gradcheck.csv).
    Gradcheck {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Perturb the analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub cohort: CohortConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub input: Option<PathBuf>,
    pub predict: Option<PathBuf>,
    pub theta: Option<PathBuf>,
    pub no_optimize: bool,
    pub gamma: f64,
    pub adam: AdamSettings,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { input: None, predict: None, theta: None, no_optimize: false, gamma: 0.95, adam: AdamSettings::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub theta: CmgpHyperparams,
    pub n_train: usize,
    pub n_test: usize,
    pub gamma: f64,
    pub replicates: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            theta: CmgpHyperparams {
                noise_std: [0.3, 0.3],
                lengthscales: [vec![0.4, 0.6], vec![0.7, 0.3]],
                coreg: [
                    Coregionalization { var0: 1.0, var1: 0.8, rho: 0.6 },
                    Coregionalization { var0: 0.4, var1: 0.5, rho: 0.2 },
                ],
            },
            n_train: 100,
            n_test: 50,
            gamma: 0.9,
            replicates: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub input: Option<PathBuf>,
    pub theta: Option<PathBuf>,
    /// Size of the simulated dataset used without `input`.
    pub n: usize,
    pub d: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { input: None, theta: None, n: 40, d: 3 }
    }
}

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct CliFailure {
    pub code: i32,
    pub error: CmgpError,
}

impl std::fmt::Display for CliFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

/// 2 for invalid configs or inputs, 1 for failures while running.
pub fn exit_code(error: &CmgpError) -> i32 {
    match error {
        CmgpError::InvalidInput(_)
        | CmgpError::Csv { .. }
        | CmgpError::MissingColumn { .. }
        | CmgpError::EmptyFile { .. }
        | CmgpError::EmptyArm { .. }
        | CmgpError::NonFinite { .. }
        | CmgpError::Json(_) => 2,
        _ => 1,
    }
}

fn validation<T>(r: Result<T>) -> std::result::Result<T, CliFailure> {
    r.map_err(|error| CliFailure { code: 2, error })
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, CliFailure> {
    r.map_err(|error| CliFailure { code: exit_code(&error), error })
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CmgpError::InvalidInput(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CmgpError::InvalidInput(format!("config {}: {e}", p.display())))
        }
    }
}

/// Reads hyperparameters from a bare JSON object or from a `theta.json`
/// artifact (which wraps them under `theta`).
pub fn load_theta(path: &Path) -> Result<CmgpHyperparams> {
    let text = fs::read_to_string(path)
        .map_err(|e| CmgpError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(inner) = value.get_mut("theta") {
        value = inner.take();
    }
    let theta: CmgpHyperparams = serde_json::from_value(value)
        .map_err(|e| CmgpError::InvalidInput(format!("{}: {e}", path.display())))?;
    theta.validate()?;
    Ok(theta)
}

fn require_input(path: Option<PathBuf>) -> Result<PathBuf> {
    path.ok_or_else(|| CmgpError::InvalidInput("an input CSV is required (--input or config `input`)".into()))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(CmgpError::InvalidInput(format!("gamma must be in [0, 1), got {gamma}")))
    }
}

fn snapshot<T: Serialize>(command: &str, seed: u64, config: &T) -> Result<String> {
    Ok(format!("cmgp {command}\nseed: {seed}\nconfig: {}", serde_json::to_string(config)?))
}

fn create(out_dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(out_dir)?;
    Ok(BufWriter::new(File::create(out_dir.join(name))?))
}

fn write_json(out_dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    let mut f = create(out_dir, name)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Parses nothing; executes an already-parsed command line.
pub fn run(cli: Cli) -> std::result::Result<(), CliFailure> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let config_path = cli.config.as_deref();
    let out = cli.out_dir.as_path();
    if let Some(g) = cli.gamma {
        validation(check_gamma(g))?;
    }
    match cli.command {
        Command::Simulate => {
            let config: SimulateConfig = validation(load_config(config_path))?;
            validation(config.cohort.validate())?;
            runtime(cmd_simulate(&config, seed, out))
        }
        Command::Fit { input, predict, theta, no_optimize } => {
            let mut config: FitConfig = validation(load_config(config_path))?;
            config.input = input.or(config.input);
            config.predict = predict.or(config.predict);
            config.theta = theta.or(config.theta);
            config.no_optimize |= no_optimize;
            config.gamma = cli.gamma.unwrap_or(config.gamma);
            validation(check_gamma(config.gamma).and_then(|_| config.adam.validate()))?;
            if config.no_optimize && config.theta.is_none() {
                return validation(Err(CmgpError::InvalidInput("--no-optimize needs --theta".into())));
            }
            cmd_fit(&config, seed, out)
        }
        Command::Predict { input, theta } => {
            let mut config: FitConfig = validation(load_config(config_path))?;
            config.input = input.or(config.input);
            config.theta = theta.or(config.theta);
            config.gamma = cli.gamma.unwrap_or(config.gamma);
            config.no_optimize = true;
            validation(check_gamma(config.gamma))?;
            cmd_predict(&config, seed, out)
        }
        Command::Evaluate { input, theta } => {
            let mut config: FitConfig = validation(load_config(config_path))?;
            config.input = input.or(config.input);
            config.theta = theta.or(config.theta);
            config.gamma = cli.gamma.unwrap_or(config.gamma);
            validation(check_gamma(config.gamma).and_then(|_| config.adam.validate()))?;
            cmd_evaluate(&config, seed, out)
        }
        Command::Coverage { replicates } => {
            let mut config: CoverageConfig = validation(load_config(config_path))?;
            config.replicates = replicates.unwrap_or(config.replicates);
            config.gamma = cli.gamma.unwrap_or(config.gamma);
            validation(check_gamma(config.gamma).and_then(|_| config.theta.validate()))?;
            runtime(cmd_coverage(&config, seed, out))
        }
        Command::Benchmark { replicates, plot_data } => {
            let mut config: BenchmarkConfig = validation(load_config(config_path))?;
            config.replicates = replicates.unwrap_or(config.replicates);
            config.gamma = cli.gamma.unwrap_or(config.gamma);
            validation(config.validate())?;
            runtime(cmd_benchmark(&config, seed, out, plot_data))
        }
        Command::Gradcheck { input, theta, corrupt_gradient } => {
            let mut config: GradcheckConfig = validation(load_config(config_path))?;
            config.input = input.or(config.input);
            config.theta = theta.or(config.theta);
            cmd_gradcheck(&config, seed, out, corrupt_gradient)
        }
    }
}

pub fn cmd_simulate(config: &SimulateConfig, seed: u64, out: &Path) -> Result<()> {
    let cohort = eval::simulate_cohort(&config.cohort, seed, 0)?;
    for w in &cohort.warnings {
        log::warn!("{w}");
    }
    let mut f = create(out, "dataset.csv")?;
    dataset::write_csv(&mut f, &cohort.dataset, Some(&cohort.truth), Some(&snapshot("simulate", seed, config)?))?;
    f.flush()?;
    log::info!("wrote {} subjects to {}", cohort.dataset.n(), out.join("dataset.csv").display());
    Ok(())
}

fn load_dataset(path: &Path) -> std::result::Result<dataset::LoadedDataset, CliFailure> {
    validation(dataset::load_csv(path))
}

fn write_predictions(
    out: &Path,
    name: &str,
    model: &inference::PosteriorModel,
    features: &nalgebra::DMatrix<f64>,
    gamma: f64,
    comment: &str,
) -> Result<Vec<inference::ItePrediction>> {
    let preds = model.predict_rows(features, gamma)?;
    let mut f = create(out, name)?;
    inference::write_predictions_csv(&mut f, &preds, Some(comment))?;
    f.flush()?;
    Ok(preds)
}

/// Loads covariates to predict: a dataset CSV, or one with only feature
/// columns (`w`/`y` absent).
fn load_query_features(path: &Path, d: usize) -> Result<nalgebra::DMatrix<f64>> {
    match dataset::load_csv(path) {
        Ok(loaded) => Ok(loaded.dataset.features().clone()),
        Err(CmgpError::MissingColumn { .. }) => {
            let mut reader = csv::ReaderBuilder::new()
                .comment(Some(b'#'))
                .trim(csv::Trim::All)
                .from_path(path)
                .map_err(|e| CmgpError::InvalidInput(format!("{}: {e}", path.display())))?;
            let headers = reader.headers().map_err(|e| CmgpError::InvalidInput(e.to_string()))?.clone();
            let cols: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| *h != "id").map(|(i, _)| i).collect();
            if cols.len() != d {
                return Err(CmgpError::InvalidInput(format!(
                    "{}: expected {d} feature columns, found {}",
                    path.display(),
                    cols.len()
                )));
            }
            let mut values = Vec::new();
            for (row, record) in reader.records().enumerate() {
                let record = record.map_err(|e| CmgpError::InvalidInput(e.to_string()))?;
                for &c in &cols {
                    let v: f64 = record[c].parse().map_err(|_| CmgpError::Csv {
                        path: path.to_path_buf(),
                        row: row + 1,
                        column: headers[c].to_owned(),
                        message: format!("not a number: `{}`", &record[c]),
                    })?;
                    values.push(v);
                }
            }
            if values.is_empty() {
                return Err(CmgpError::EmptyFile { path: path.to_path_buf() });
            }
            Ok(nalgebra::DMatrix::from_row_slice(values.len() / d, d, &values))
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_fit(config: &FitConfig, seed: u64, out: &Path) -> std::result::Result<(), CliFailure> {
    let input = validation(require_input(config.input.clone()))?;
    let loaded = load_dataset(&input)?;
    let ds = loaded.dataset;
    validation(ds.ensure_both_arms())?;
    let start = match &config.theta {
        Some(p) => Some(validation(load_theta(p))?),
        None => None,
    };
    if let Some(t) = &start {
        if t.d() != ds.d() {
            return validation(Err(CmgpError::InvalidInput(format!(
                "hyperparameters have d = {}, dataset has d = {}",
                t.d(),
                ds.d()
            ))));
        }
    }
    let comment = runtime(snapshot("fit", seed, config))?;
    let (theta, trace) = if config.no_optimize {
        (start.expect("checked above"), None)
    } else {
        let (t, tr) = runtime(optimizer::fit(&ds, &config.adam, start.as_ref()))?;
        (t, Some(tr))
    };
    runtime(write_json(
        out,
        "theta.json",
        &json!({
            "seed": seed,
            "config": config,
            "theta": theta,
            "r_hat": trace.as_ref().map(|t| t.best_r_hat()),
            "iterations": trace.as_ref().map(|t| t.iterations_used),
            "converged": trace.as_ref().map(|t| t.converged),
        }),
    ))?;
    runtime((|| {
        let mut f = create(out, "trace.csv")?;
        match &trace {
            Some(t) => t.write_csv(&mut f, Some(&comment))?,
            None => {
                for line in comment.lines() {
                    writeln!(f, "# {line}")?;
                }
                writeln!(f, "iter,r_hat,q,grad_norm")?;
            }
        }
        f.flush()?;
        Ok(())
    })())?;
    let model = runtime(fit_posterior(&ds, &theta))?;
    runtime(write_predictions(out, "predictions.csv", &model, ds.features(), config.gamma, &comment))?;
    if let Some(p) = &config.predict {
        let x = validation(load_query_features(p, ds.d()))?;
        runtime(write_predictions(out, "predictions_extra.csv", &model, &x, config.gamma, &comment))?;
    }
    Ok(())
}

pub fn cmd_predict(config: &FitConfig, seed: u64, out: &Path) -> std::result::Result<(), CliFailure> {
    let input = validation(require_input(config.input.clone()))?;
    let theta_path = validation(
        config.theta.clone().ok_or_else(|| CmgpError::InvalidInput("predict needs --theta".into())),
    )?;
    let theta = validation(load_theta(&theta_path))?;
    let ds = load_dataset(&input)?.dataset;
    validation(ds.ensure_both_arms())?;
    let comment = runtime(snapshot("predict", seed, config))?;
    let model = runtime(fit_posterior(&ds, &theta))?;
    runtime(write_predictions(out, "predictions.csv", &model, ds.features(), config.gamma, &comment))?;
    Ok(())
}

pub fn cmd_evaluate(config: &FitConfig, seed: u64, out: &Path) -> std::result::Result<(), CliFailure> {
    let input = validation(require_input(config.input.clone()))?;
    let loaded = load_dataset(&input)?;
    let truth = validation(
        loaded.truth.ok_or_else(|| CmgpError::InvalidInput("evaluate needs f0 and f1 columns".into())),
    )?;
    let ds = loaded.dataset;
    validation(ds.ensure_both_arms())?;
    let theta = match &config.theta {
        Some(p) => validation(load_theta(p))?,
        None => runtime(optimizer::fit(&ds, &config.adam, None))?.0,
    };
    let comment = runtime(snapshot("evaluate", seed, config))?;
    let model = runtime(fit_posterior(&ds, &theta))?;
    let preds = runtime(write_predictions(out, "predictions.csv", &model, ds.features(), config.gamma, &comment))?;
    let est: Vec<f64> = preds.iter().map(|p| p.point).collect();
    let pehe = runtime(eval::pehe(&est, &truth.true_ite))?;
    let covered = preds
        .iter()
        .zip(&truth.true_ite)
        .filter(|(p, t)| p.interval.0 <= **t && **t <= p.interval.1)
        .count();
    runtime(write_json(
        out,
        "report.json",
        &json!({
            "seed": seed,
            "config": config,
            "n": ds.n(),
            "sqrt_pehe": pehe.sqrt(),
            "gamma": config.gamma,
            "interval_coverage": covered as f64 / ds.n() as f64,
            "theta": theta,
        }),
    ))
}

pub fn cmd_coverage(config: &CoverageConfig, seed: u64, out: &Path) -> Result<()> {
    let d = config.theta.d();
    let report = eval::coverage_eval(&config.theta, config.n_train, config.n_test, d, config.gamma, config.replicates, seed)?;
    log::info!("coverage {:.4} ({} of {})", report.coverage, report.covered, report.total);
    write_json(out, "report.json", &json!({ "seed": seed, "config": config, "coverage": report }))
}

pub fn cmd_benchmark(config: &BenchmarkConfig, seed: u64, out: &Path, plot_data: bool) -> Result<()> {
    let report = eval::run_benchmark(config, seed)?;
    for a in &report.aggregates {
        log::info!(
            "{}: in-sample {:.3} ± {:.3}, out-of-sample {:.3} ± {:.3} ({} replicates)",
            a.method,
            a.in_sample_mean,
            a.in_sample_se,
            a.out_sample_mean,
            a.out_sample_se,
            a.count
        );
    }
    if !report.failures.is_empty() {
        log::warn!("{} replicate fits failed", report.failures.len());
    }
    write_json(out, "report.json", &serde_json::to_value(&report)?)?;
    let comment = snapshot("benchmark", seed, config)?;
    let mut f = create(out, "records.csv")?;
    eval::write_records_csv(&mut f, &report.records, Some(&comment))?;
    f.flush()?;
    if plot_data {
        let mut f = create(out, "plot.csv")?;
        eval::write_plot_csv(&mut f, &report.plot_points, Some(&comment))?;
        f.flush()?;
    }
    Ok(())
}

/// Small selection-biased dataset for gradient checks.
pub fn gradcheck_dataset(n: usize, d: usize, seed: u64) -> Result<ObservationalDataset> {
    let x = dataset::make_synthetic_covariates(n, d, derive_seed(seed, 1, 0))?;
    let w = dataset::assign_treatments(&x, (n / 3).max(1), 1.0, derive_seed(seed, 2, 0))?;
    let (po, _) = dataset::simulate_unos_outcomes(&x, 5.0, (1.0, 1.0), derive_seed(seed, 3, 0))?;
    ObservationalDataset::new(x, w.clone(), po.factual(&w))
}

pub fn cmd_gradcheck(
    config: &GradcheckConfig,
    seed: u64,
    out: &Path,
    corrupt: bool,
) -> std::result::Result<(), CliFailure> {
    let ds = match &config.input {
        Some(p) => load_dataset(p)?.dataset,
        None => validation(gradcheck_dataset(config.n, config.d, seed))?,
    };
    validation(ds.ensure_both_arms())?;
    let theta = match &config.theta {
        Some(p) => validation(load_theta(p))?,
        None => runtime(optimizer::init_hyperparameters(&ds))?,
    };
    if theta.d() != ds.d() {
        return validation(Err(CmgpError::InvalidInput("hyperparameter dimension does not match dataset".into())));
    }
    let mut analytic = runtime(objective::gradient_log_space(&ds, &theta))?;
    if corrupt {
        analytic[0] = analytic[0] * 1.5 + 1.0;
    }
    let numeric = runtime(objective::finite_difference_gradient(&ds, &theta, objective::GRADCHECK_STEP))?;
    let rows = objective::compare_gradients(&analytic, &numeric, ds.d());
    let comment = runtime(snapshot("gradcheck", seed, config))?;
    runtime((|| {
        let mut f = create(out, "gradcheck.csv")?;
        for line in comment.lines() {
            writeln!(f, "# {line}")?;
        }
        writeln!(f, "name,analytic,numeric,abs_err,rel_err,ok")?;
        for r in &rows {
            writeln!(f, "{},{},{},{},{},{}", r.name, r.analytic, r.numeric, r.abs_err, r.rel_err, r.ok)?;
        }
        f.flush()?;
        Ok(())
    })())?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.ok).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
        log::info!("gradient check passed, max relative error {worst:.2e}");
        Ok(())
    } else {
        Err(CliFailure {
            code: 1,
            error: CmgpError::Numerical(format!("gradient check failed for {}", failed.join(", "))),
        })
    }
}
