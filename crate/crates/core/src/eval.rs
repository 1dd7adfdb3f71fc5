//! PEHE, the Monte-Carlo benchmark harness and credible-interval coverage.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline;
use crate::dataset::{self, ObservationalDataset, SplitSpec, SyntheticGroundTruth};
use crate::error::{CmgpError, Result};
use crate::inference::fit_posterior;
use crate::kernel::{self, CmgpHyperparams};
use crate::linalg;
use crate::optimizer::{self, AdamSettings};
use crate::rng::{self, derive_seed};

/// Mean squared difference between estimated and true effects.
pub fn pehe(estimated: &[f64], truth: &[f64]) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(CmgpError::InvalidInput(format!(
            "{} estimates for {} true effects",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(CmgpError::InvalidInput("PEHE of an empty set".into()));
    }
    let sse: f64 = estimated.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum();
    Ok(sse / estimated.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cmgp,
    NaiveGp,
    /// Estimates replaced by the true effects; a metric sanity check.
    Truth,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cmgp => "cmgp",
            Method::NaiveGp => "naive-gp",
            Method::Truth => "truth",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic cohort generation: covariates, biased assignment, outcomes,
/// biased control removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n: usize,
    pub d: usize,
    pub n_treated: usize,
    pub n_remove: usize,
    pub target_mean_benefit: f64,
    pub noise_std: [f64; 2],
    /// Weight of the features in the latent treatment score.
    pub selection_strength: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n: 1006,
            d: 14,
            n_treated: 232,
            n_remove: 200,
            target_mean_benefit: 5.0,
            noise_std: [1.0, 1.0],
            selection_strength: 1.0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CmgpError::InvalidInput(m));
        if self.n < 2 || self.d < 1 {
            return bad(format!("cohort needs n >= 2 and d >= 1, got n = {}, d = {}", self.n, self.d));
        }
        if self.n_treated == 0 || self.n_treated >= self.n {
            return bad(format!("n_treated must be in 1..{}", self.n));
        }
        if self.n_remove >= self.n - self.n_treated {
            return bad(format!("cannot remove {} of {} controls", self.n_remove, self.n - self.n_treated));
        }
        if !self.target_mean_benefit.is_finite()
            || self.noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
            || !self.selection_strength.is_finite()
        {
            return bad("cohort parameters must be finite, noise std >= 0".into());
        }
        Ok(())
    }
}

/// Seed streams of one replicate.
pub mod streams {
    pub const COVARIATES: u32 = 1;
    pub const TREATMENT: u32 = 2;
    pub const OUTCOMES: u32 = 3;
    pub const SUBSAMPLE: u32 = 4;
    pub const SPLIT: u32 = 5;
    pub const COVERAGE: u32 = 6;
}

/// A simulated cohort after biased removal, with its ground truth.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub dataset: ObservationalDataset,
    pub truth: SyntheticGroundTruth,
    pub warnings: Vec<String>,
}

/// Generates one cohort; every random step draws from its own derived seed.
pub fn simulate_cohort(config: &CohortConfig, master_seed: u64, replicate: u32) -> Result<Cohort> {
    config.validate()?;
    let seed = |stream| derive_seed(master_seed, stream, replicate);
    let x = dataset::make_synthetic_covariates(config.n, config.d, seed(streams::COVARIATES))?;
    let w = dataset::assign_treatments(&x, config.n_treated, config.selection_strength, seed(streams::TREATMENT))?;
    let noise = (config.noise_std[0], config.noise_std[1]);
    let (po, truth) =
        dataset::simulate_unos_outcomes(&x, config.target_mean_benefit, noise, seed(streams::OUTCOMES))?;
    let full = ObservationalDataset::new(x, w.clone(), po.factual(&w))?;
    if config.n_remove == 0 {
        return Ok(Cohort { dataset: full, truth, warnings: Vec::new() });
    }
    let sub = dataset::biased_subsample(&full, config.n_remove, seed(streams::SUBSAMPLE))?;
    let truth = truth.select(&sub.kept);
    Ok(Cohort { dataset: sub.dataset, truth, warnings: sub.warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub cohort: CohortConfig,
    pub replicates: usize,
    pub methods: Vec<Method>,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub gamma: f64,
    pub adam: AdamSettings,
    /// Pre-generated realizations (CSV with f0/f1 columns); when non-empty
    /// these replace the synthetic cohorts, one replicate per file.
    pub external: Vec<PathBuf>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            cohort: CohortConfig::default(),
            replicates: 30,
            methods: vec![Method::Cmgp, Method::NaiveGp],
            split: [0.6, 0.2, 0.2],
            gamma: 0.95,
            adam: AdamSettings::default(),
            external: Vec::new(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.external.is_empty() {
            self.cohort.validate()?;
            if self.replicates == 0 {
                return Err(CmgpError::InvalidInput("replicates must be >= 1".into()));
            }
        }
        if self.methods.is_empty() {
            return Err(CmgpError::InvalidInput("no methods selected".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CmgpError::InvalidInput(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        self.adam.validate()?;
        SplitSpec::new(self.split[0], self.split[1], self.split[2], 0)?;
        Ok(())
    }

    pub fn replicate_count(&self) -> usize {
        if self.external.is_empty() {
            self.replicates
        } else {
            self.external.len()
        }
    }
}

/// One (replicate, method) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub method: Method,
    pub in_sample_sqrt_pehe: f64,
    pub out_sample_sqrt_pehe: f64,
    pub fit_seconds: f64,
    /// Objective at the starting point and at the returned parameters
    /// (risk objective for CMGP, summed negative evidence for the naive GP).
    pub objective_initial: f64,
    pub objective_final: f64,
    pub iterations: usize,
    /// Every recorded iterate positive and coregionalization-PSD.
    pub trace_feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub method: Option<Method>,
    pub message: String,
}

/// Mean and standard error of a method's √PEHE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub count: usize,
    pub in_sample_mean: f64,
    pub in_sample_se: f64,
    pub out_sample_mean: f64,
    pub out_sample_se: f64,
}

/// `baseline - candidate` over replicates where both succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub candidate: Method,
    pub baseline: Method,
    pub count: usize,
    pub in_sample_mean_diff: f64,
    pub in_sample_se: f64,
    pub out_sample_mean_diff: f64,
    pub out_sample_se: f64,
}

impl PairedComparison {
    /// Candidate better on both metrics by more than `k` paired standard errors.
    pub fn significant(&self, k: f64) -> bool {
        self.in_sample_mean_diff > k * self.in_sample_se && self.out_sample_mean_diff > k * self.out_sample_se
    }
}

/// One test-set point for external plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub method: Method,
    pub truth: f64,
    pub estimate: f64,
    pub interval: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub aggregates: Vec<MethodAggregate>,
    pub comparisons: Vec<PairedComparison>,
    pub failures: Vec<ReplicateFailure>,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
    /// Test-set points of the first replicate.
    #[serde(skip)]
    pub plot_points: Vec<PlotPoint>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Per-method aggregates, in the order methods first appear.
pub fn aggregate(records: &[ReplicateRecord]) -> Vec<MethodAggregate> {
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let rs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
            let ins: Vec<f64> = rs.iter().map(|r| r.in_sample_sqrt_pehe).collect();
            let outs: Vec<f64> = rs.iter().map(|r| r.out_sample_sqrt_pehe).collect();
            let (in_sample_mean, in_sample_se) = mean_se(&ins);
            let (out_sample_mean, out_sample_se) = mean_se(&outs);
            MethodAggregate { method, count: rs.len(), in_sample_mean, in_sample_se, out_sample_mean, out_sample_se }
        })
        .collect()
}

/// Paired differences `baseline - candidate` on shared replicates.
pub fn compare(records: &[ReplicateRecord], candidate: Method, baseline: Method) -> Option<PairedComparison> {
    let mut din = Vec::new();
    let mut dout = Vec::new();
    for c in records.iter().filter(|r| r.method == candidate) {
        if let Some(b) = records.iter().find(|r| r.method == baseline && r.replicate == c.replicate) {
            din.push(b.in_sample_sqrt_pehe - c.in_sample_sqrt_pehe);
            dout.push(b.out_sample_sqrt_pehe - c.out_sample_sqrt_pehe);
        }
    }
    if din.is_empty() {
        return None;
    }
    let (in_sample_mean_diff, in_sample_se) = mean_se(&din);
    let (out_sample_mean_diff, out_sample_se) = mean_se(&dout);
    Some(PairedComparison {
        candidate,
        baseline,
        count: din.len(),
        in_sample_mean_diff,
        in_sample_se,
        out_sample_mean_diff,
        out_sample_se,
    })
}

struct MethodOutcome {
    record: ReplicateRecord,
    plot: Vec<PlotPoint>,
}

fn rows(ds: &ObservationalDataset) -> Vec<Vec<f64>> {
    (0..ds.n()).map(|i| kernel::row_vec(ds.features(), i)).collect()
}

fn trace_feasible(trace: &optimizer::FitTrace, d: usize) -> bool {
    trace.records.iter().all(|r| {
        r.params.iter().all(|p| *p > 0.0 && p.is_finite())
            && CmgpHyperparams::from_vector(&r.params, d).is_ok_and(|t| t.coreg.iter().all(|a| a.is_psd()))
    })
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    method: Method,
    config: &BenchmarkConfig,
    replicate: usize,
    seed: u64,
    train: (&ObservationalDataset, &SyntheticGroundTruth),
    test: (&ObservationalDataset, &SyntheticGroundTruth),
    want_plot: bool,
) -> Result<MethodOutcome> {
    let start = Instant::now();
    let train_rows = rows(train.0);
    let test_rows = rows(test.0);
    let d = train.0.d();
    let mut plot = Vec::new();
    let (est_in, est_out, objective_initial, objective_final, iterations, feasible) = match method {
        Method::Cmgp => {
            let (theta, trace) = optimizer::fit(train.0, &config.adam, None)?;
            let model = fit_posterior(train.0, &theta)?;
            let est_in = train_rows.iter().map(|x| model.predict_mean(x).map(|(a, b)| b - a)).collect::<Result<Vec<_>>>()?;
            let mut est_out = Vec::with_capacity(test_rows.len());
            for (i, x) in test_rows.iter().enumerate() {
                let p = model.predict(x, config.gamma)?;
                est_out.push(p.point);
                if want_plot {
                    plot.push(PlotPoint { method, truth: test.1.true_ite[i], estimate: p.point, interval: Some(p.interval) });
                }
            }
            let feasible = trace_feasible(&trace, d) && theta.validate().is_ok();
            (est_in, est_out, trace.initial_r_hat(), trace.best_r_hat(), trace.iterations_used, feasible)
        }
        Method::NaiveGp => {
            let pair = baseline::fit_naive_gp(train.0, &config.adam)?;
            let est_in = train_rows.iter().map(|x| pair.predict_ite(x)).collect::<Result<Vec<_>>>()?;
            let est_out = test_rows.iter().map(|x| pair.predict_ite(x)).collect::<Result<Vec<_>>>()?;
            if want_plot {
                for (i, e) in est_out.iter().enumerate() {
                    plot.push(PlotPoint { method, truth: test.1.true_ite[i], estimate: *e, interval: None });
                }
            }
            let init = pair.control.initial_nlml + pair.treated.initial_nlml;
            let best = pair.control.best_nlml + pair.treated.best_nlml;
            let iters = pair.control.iterations_used.max(pair.treated.iterations_used);
            (est_in, est_out, init, best, iters, true)
        }
        Method::Truth => {
            if want_plot {
                for &t in &test.1.true_ite {
                    plot.push(PlotPoint { method, truth: t, estimate: t, interval: Some((t, t)) });
                }
            }
            (train.1.true_ite.clone(), test.1.true_ite.clone(), 0.0, 0.0, 0, true)
        }
    };
    let record = ReplicateRecord {
        replicate,
        seed,
        method,
        in_sample_sqrt_pehe: pehe(&est_in, &train.1.true_ite)?.sqrt(),
        out_sample_sqrt_pehe: pehe(&est_out, &test.1.true_ite)?.sqrt(),
        fit_seconds: start.elapsed().as_secs_f64(),
        objective_initial,
        objective_final,
        iterations,
        trace_feasible: feasible,
    };
    Ok(MethodOutcome { record, plot })
}

fn load_realization(path: &PathBuf) -> Result<(ObservationalDataset, SyntheticGroundTruth)> {
    let loaded = dataset::load_csv(path)?;
    let truth = loaded.truth.ok_or_else(|| {
        CmgpError::InvalidInput(format!("{}: benchmark realizations need f0 and f1 columns", path.display()))
    })?;
    Ok((loaded.dataset, truth))
}

type ReplicateResult = (Vec<MethodOutcome>, Vec<ReplicateFailure>);

fn run_replicate(config: &BenchmarkConfig, master_seed: u64, replicate: usize, want_plot: bool) -> ReplicateResult {
    let counter = replicate as u32;
    let seed = derive_seed(master_seed, 0, counter);
    let fail = |method: Option<Method>, e: CmgpError| ReplicateFailure { replicate, method, message: e.to_string() };
    let data = if config.external.is_empty() {
        simulate_cohort(&config.cohort, master_seed, counter).map(|c| (c.dataset, c.truth))
    } else {
        load_realization(&config.external[replicate])
    };
    let prepared = data.and_then(|(ds, truth)| {
        let spec = SplitSpec::new(config.split[0], config.split[1], config.split[2], derive_seed(master_seed, streams::SPLIT, counter))?;
        dataset::split(&ds, Some(&truth), &spec)
    });
    let parts = match prepared {
        Ok(p) => p,
        Err(e) => return (Vec::new(), vec![fail(None, e)]),
    };
    let [(train, train_truth), _, (test, test_truth)] = parts;
    let (train_truth, test_truth) = (train_truth.expect("truth attached"), test_truth.expect("truth attached"));
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for &method in &config.methods {
        match run_method(method, config, replicate, seed, (&train, &train_truth), (&test, &test_truth), want_plot) {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("replicate {replicate}, {method}: {e}");
                failures.push(fail(Some(method), e));
            }
        }
    }
    (outcomes, failures)
}

/// Runs every replicate (in parallel) and assembles the report. Replicate
/// `r` draws all randomness from seeds derived from `(seed, stream, r)`, so
/// the result does not depend on scheduling.
pub fn run_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<BenchmarkReport> {
    config.validate()?;
    let results: Vec<ReplicateResult> = (0..config.replicate_count())
        .into_par_iter()
        .map(|r| run_replicate(config, seed, r, r == 0))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut plot_points = Vec::new();
    for (outcomes, fails) in results {
        for o in outcomes {
            records.push(o.record);
            plot_points.extend(o.plot);
        }
        failures.extend(fails);
    }
    let aggregates = aggregate(&records);
    let mut comparisons = Vec::new();
    if config.methods.contains(&Method::Cmgp) && config.methods.contains(&Method::NaiveGp) {
        comparisons.extend(compare(&records, Method::Cmgp, Method::NaiveGp));
    }
    Ok(BenchmarkReport { seed, config: config.clone(), aggregates, comparisons, failures, records, plot_points })
}

/// Raw records as CSV.
pub fn write_records_csv<W: Write>(out: &mut W, records: &[ReplicateRecord], comment: Option<&str>) -> Result<()> {
    write_comment(out, comment)?;
    writeln!(
        out,
        "replicate,seed,method,in_sample_sqrt_pehe,out_sample_sqrt_pehe,fit_seconds,objective_initial,objective_final,iterations,trace_feasible"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.replicate,
            r.seed,
            r.method,
            r.in_sample_sqrt_pehe,
            r.out_sample_sqrt_pehe,
            r.fit_seconds,
            r.objective_initial,
            r.objective_final,
            r.iterations,
            r.trace_feasible
        )?;
    }
    Ok(())
}

/// `method,truth,estimate,lo,hi`; interval columns empty when unavailable.
pub fn write_plot_csv<W: Write>(out: &mut W, points: &[PlotPoint], comment: Option<&str>) -> Result<()> {
    write_comment(out, comment)?;
    writeln!(out, "method,truth,estimate,lo,hi")?;
    for p in points {
        match p.interval {
            Some((lo, hi)) => writeln!(out, "{},{},{},{},{}", p.method, p.truth, p.estimate, lo, hi)?,
            None => writeln!(out, "{},{},{},,", p.method, p.truth, p.estimate)?,
        }
    }
    Ok(())
}

fn write_comment<W: Write>(out: &mut W, comment: Option<&str>) -> Result<()> {
    if let Some(text) = comment {
        for line in text.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(())
}

/// Pooled coverage over all test points of all replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub gamma: f64,
    pub covered: usize,
    pub total: usize,
    pub coverage: f64,
}

/// Well-specified calibration check: outcomes are drawn from the model
/// itself at `theta_true` and the posterior is evaluated at the same θ.
///
/// Per replicate, both potential-outcome surfaces are sampled jointly at all
/// `n_train + n_test` points, training treatments follow a logistic rule in
/// the first feature, and each test point contributes one indicator of
/// `f1 - f0` falling inside its credible interval.
pub fn coverage_eval(
    theta_true: &CmgpHyperparams,
    n_train: usize,
    n_test: usize,
    d: usize,
    gamma: f64,
    replicates: usize,
    seed: u64,
) -> Result<CoverageReport> {
    theta_true.validate()?;
    if theta_true.d() != d || n_train < 2 || n_test == 0 || replicates == 0 {
        return Err(CmgpError::InvalidInput(format!(
            "coverage needs matching d, n_train >= 2, n_test >= 1 and replicates >= 1 (d = {d}, θ has {})",
            theta_true.d()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(CmgpError::InvalidInput(format!("gamma must be in [0, 1), got {gamma}")));
    }
    let hits: Vec<usize> = (0..replicates)
        .into_par_iter()
        .map(|r| coverage_replicate(theta_true, n_train, n_test, d, gamma, derive_seed(seed, streams::COVERAGE, r as u32)))
        .collect::<Result<_>>()?;
    let covered: usize = hits.iter().sum();
    let total = replicates * n_test;
    Ok(CoverageReport { gamma, covered, total, coverage: covered as f64 / total as f64 })
}

/// Joint prior covariance of `(f0(x_1..x_m), f1(x_1..x_m))`.
fn joint_prior(x: &DMatrix<f64>, theta: &CmgpHyperparams) -> DMatrix<f64> {
    let m = x.nrows();
    let base = [
        kernel::base_kernel_gram(x, &theta.lengthscales[0]),
        kernel::base_kernel_gram(x, &theta.lengthscales[1]),
    ];
    DMatrix::from_fn(2 * m, 2 * m, |i, j| {
        let (a, b) = ((i / m) as u8, (j / m) as u8);
        let (p, q) = (i % m, j % m);
        theta.coreg[0].entry(a, b) * base[0][(p, q)] + theta.coreg[1].entry(a, b) * base[1][(p, q)]
    })
}

fn coverage_replicate(
    theta: &CmgpHyperparams,
    n_train: usize,
    n_test: usize,
    d: usize,
    gamma: f64,
    seed: u64,
) -> Result<usize> {
    let m = n_train + n_test;
    let mut rng = rng::seeded(seed);
    let x = DMatrix::from_fn(m, d, |_, _| rng.random::<f64>());
    let (chol, _) = linalg::cholesky_with_jitter(&joint_prior(&x, theta))?;
    let z = DVector::from_fn(2 * m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = chol.l() * z;

    let mut w = vec![0u8; n_train];
    loop {
        for (i, wi) in w.iter_mut().enumerate() {
            let p = 1.0 / (1.0 + (-4.0 * (x[(i, 0)] - 0.5)).exp());
            *wi = (rng.random::<f64>() < p) as u8;
        }
        if w.contains(&0) && w.contains(&1) {
            break;
        }
    }
    let y: Vec<f64> = (0..n_train)
        .map(|i| {
            let t = w[i] as usize;
            f[t * m + i] + theta.noise_std[t] * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let train = ObservationalDataset::new(x.rows(0, n_train).into_owned(), w, y)?;
    let model = fit_posterior(&train, theta)?;
    let mut covered = 0;
    for j in n_train..m {
        let pred = model.predict(&kernel::row_vec(&x, j), gamma)?;
        let truth = f[m + j] - f[j];
        if pred.interval.0 <= truth && truth <= pred.interval.1 {
            covered += 1;
        }
    }
    Ok(covered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Coregionalization;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_config(methods: Vec<Method>, replicates: usize) -> BenchmarkConfig {
        BenchmarkConfig {
            cohort: CohortConfig { n: 90, d: 3, n_treated: 30, n_remove: 15, ..Default::default() },
            replicates,
            methods,
            adam: AdamSettings { max_iters: 15, ..Default::default() },
            ..Default::default()
        }
    }

    fn theta2() -> CmgpHyperparams {
        CmgpHyperparams {
            noise_std: [0.3, 0.3],
            lengthscales: [vec![0.5, 0.7], vec![0.4, 0.9]],
            coreg: [
                Coregionalization { var0: 1.0, var1: 0.8, rho: 0.5 },
                Coregionalization { var0: 0.3, var1: 0.6, rho: 0.1 },
            ],
        }
    }

    #[test]
    fn pehe_cases() {
        assert_eq!(pehe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let t = [0.5, -1.0, 3.0];
        let shifted: Vec<f64> = t.iter().map(|v| v + 2.0).collect();
        assert_relative_eq!(pehe(&shifted, &t).unwrap(), 4.0, epsilon = 1e-15);
        assert_relative_eq!(pehe(&[1.0, 2.0, 3.0], &[1.0, 1.0, 5.0]).unwrap(), 5.0 / 3.0, epsilon = 1e-15);
        assert!(pehe(&[1.0], &[1.0, 2.0]).is_err());
        assert!(pehe(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn pehe_permutation_and_scale(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30), c in -5.0f64..5.0) {
            let (e, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let base = pehe(&e, &t).unwrap();
            let (er, tr): (Vec<f64>, Vec<f64>) = (e.iter().rev().copied().collect(), t.iter().rev().copied().collect());
            prop_assert!((pehe(&er, &tr).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
            let es: Vec<f64> = e.iter().map(|x| c * x).collect();
            let ts: Vec<f64> = t.iter().map(|x| c * x).collect();
            prop_assert!((pehe(&es, &ts).unwrap() - c * c * base).abs() <= 1e-10 * (1.0 + c * c * base));
        }
    }

    #[test]
    fn default_cohort_has_806_subjects() {
        let c = simulate_cohort(&CohortConfig::default(), 7, 0).unwrap();
        assert_eq!(c.dataset.n(), 806);
        assert_eq!(c.dataset.arm_counts(), (574, 232));
        assert_eq!(c.truth.len(), 806);
    }

    #[test]
    fn one_replicate_two_records() {
        let report = run_benchmark(&small_config(vec![Method::Cmgp, Method::NaiveGp], 1), 3).unwrap();
        assert_eq!(report.records.len(), 2);
        assert!(report.failures.is_empty());
        assert_eq!(report.comparisons.len(), 1);
        let cm = report.records.iter().find(|r| r.method == Method::Cmgp).unwrap();
        assert!(cm.objective_final <= cm.objective_initial);
        assert!(cm.trace_feasible);
        assert!(!report.plot_points.is_empty());
    }

    #[test]
    fn truth_injection_scores_zero() {
        let report = run_benchmark(&small_config(vec![Method::Truth], 3), 5).unwrap();
        assert_eq!(report.records.len(), 3);
        for r in &report.records {
            assert_eq!(r.in_sample_sqrt_pehe, 0.0);
            assert_eq!(r.out_sample_sqrt_pehe, 0.0);
        }
    }

    #[test]
    fn same_seed_same_report() {
        let cfg = small_config(vec![Method::Cmgp, Method::NaiveGp], 2);
        let a = run_benchmark(&cfg, 11).unwrap();
        let b = run_benchmark(&cfg, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(ReplicateRecord { fit_seconds: 0.0, ..x.clone() }, ReplicateRecord { fit_seconds: 0.0, ..y.clone() });
        }
    }

    #[test]
    fn aggregates_recompute_from_records() {
        let report = run_benchmark(&small_config(vec![Method::Truth, Method::NaiveGp], 3), 2).unwrap();
        let again = aggregate(&report.records);
        for (a, b) in report.aggregates.iter().zip(&again) {
            assert_eq!(a.count, b.count);
            assert!((a.in_sample_mean - b.in_sample_mean).abs() <= 1e-12);
            assert!((a.out_sample_se - b.out_sample_se).abs() <= 1e-12);
        }
        let gp: Vec<f64> = report.records.iter().filter(|r| r.method == Method::NaiveGp).map(|r| r.out_sample_sqrt_pehe).collect();
        let mean = gp.iter().sum::<f64>() / 3.0;
        let agg = report.aggregates.iter().find(|a| a.method == Method::NaiveGp).unwrap();
        assert!((agg.out_sample_mean - mean).abs() <= 1e-12);
    }

    #[test]
    fn paired_comparison_by_hand() {
        let rec = |replicate, method, i, o| ReplicateRecord {
            replicate,
            seed: 0,
            method,
            in_sample_sqrt_pehe: i,
            out_sample_sqrt_pehe: o,
            fit_seconds: 0.0,
            objective_initial: 0.0,
            objective_final: 0.0,
            iterations: 0,
            trace_feasible: true,
        };
        let records = vec![
            rec(0, Method::Cmgp, 1.0, 1.0),
            rec(0, Method::NaiveGp, 2.0, 3.0),
            rec(1, Method::Cmgp, 1.0, 2.0),
            rec(1, Method::NaiveGp, 4.0, 3.0),
        ];
        let c = compare(&records, Method::Cmgp, Method::NaiveGp).unwrap();
        // differences in: 1, 3 -> mean 2, sd sqrt(2), se 1
        assert_relative_eq!(c.in_sample_mean_diff, 2.0);
        assert_relative_eq!(c.in_sample_se, 1.0, epsilon = 1e-15);
        // differences out: 2, 1 -> mean 1.5, se 0.5
        assert_relative_eq!(c.out_sample_mean_diff, 1.5);
        assert_relative_eq!(c.out_sample_se, 0.5, epsilon = 1e-15);
        assert!(c.significant(1.0));
        assert!(!c.significant(2.0));
    }

    #[test]
    fn zero_gamma_covers_nothing() {
        let r = coverage_eval(&theta2(), 30, 10, 2, 0.0, 3, 1).unwrap();
        assert_eq!(r.covered, 0);
        assert_eq!(r.total, 30);
    }

    #[test]
    fn near_certain_intervals_cover() {
        let r = coverage_eval(&theta2(), 40, 20, 2, 0.999, 10, 2).unwrap();
        assert!(r.coverage >= 0.99, "{r:?}");
    }

    #[test]
    fn joint_prior_blocks() {
        let x = dataset::make_synthetic_covariates(3, 2, 4).unwrap();
        let t = theta2();
        let k = joint_prior(&x, &t);
        for i in 0..3 {
            for j in 0..3 {
                let xi = kernel::row_vec(&x, i);
                let xj = kernel::row_vec(&x, j);
                let b = kernel::lmc_block(&xi, &xj, &t).unwrap();
                assert_relative_eq!(k[(i, j)], b[(0, 0)], epsilon = 1e-14);
                assert_relative_eq!(k[(i, 3 + j)], b[(0, 1)], epsilon = 1e-14);
                assert_relative_eq!(k[(3 + i, 3 + j)], b[(1, 1)], epsilon = 1e-14);
            }
        }
    }
}
