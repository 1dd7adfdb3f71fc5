//! Hyperparameter initialization and the log-space ADAM loop.
//!
//! Parameters are kept as `φ = exp(u)`; ADAM runs on `u` with the gradient of
//! the objective with respect to `u` (equal to `φ ⊙ ∇_φ R`), which is the
//! multiplicative update `φ ← φ ⊙ exp(-η m̂ / (sqrt(v̂) + ε))`.

use serde::{Deserialize, Serialize};

use crate::dataset::ObservationalDataset;
use crate::error::{CmgpError, Result};
use crate::kernel::{validate_or_project, CmgpHyperparams, Coregionalization};
use crate::objective;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the best objective improved by less than this fraction over
    /// the last `window` iterations.
    pub rel_tol: f64,
    pub window: usize,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 500,
            rel_tol: 1e-6,
            window: 10,
        }
    }
}

impl AdamSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.max_iters >= 1
            && self.rel_tol >= 0.0
            && self.window >= 1;
        if ok {
            Ok(())
        } else {
            Err(CmgpError::InvalidInput(format!("invalid ADAM settings: {self:?}")))
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
    pub m_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, m_hat: vec![0.0; dim], v_hat: vec![0.0; dim] }
    }

    /// Updates the moments with gradient `g` and returns the additive step
    /// `-η m̂ / (sqrt(v̂) + ε)`.
    pub fn step(&mut self, g: &[f64], s: &AdamSettings) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - s.beta1.powi(self.t as i32);
        let c2 = 1.0 - s.beta2.powi(self.t as i32);
        let mut delta = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            self.m[j] = s.beta1 * self.m[j] + (1.0 - s.beta1) * g[j];
            self.v[j] = s.beta2 * self.v[j] + (1.0 - s.beta2) * g[j] * g[j];
            self.m_hat[j] = self.m[j] / c1;
            self.v_hat[j] = self.v[j] / c2;
            delta.push(-s.learning_rate * self.m_hat[j] / (self.v_hat[j].sqrt() + s.epsilon));
        }
        delta
    }
}

/// Objective value, an auxiliary quantity for the trace, and the gradient.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub aux: f64,
    pub gradient: Vec<f64>,
}

/// Anything minimized over log-parameters.
pub trait LogObjective {
    fn evaluate(&self, log_params: &[f64]) -> Result<Evaluation>;

    /// Maps an iterate back onto the feasible set; identity by default.
    fn project(&self, log_params: &mut [f64]) {
        let _ = log_params;
    }
}

/// One optimizer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub r_hat: f64,
    pub q: f64,
    pub grad_norm: f64,
    /// Natural-scale parameters at this iterate.
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamOutcome {
    pub best_log_params: Vec<f64>,
    pub best_value: f64,
    pub best_iter: usize,
    pub trace: Vec<IterRecord>,
    pub converged: bool,
}

const MAX_FAILED_EVALS: usize = 20;

/// Minimizes `objective` from `start` and returns the best visited iterate.
///
/// A failed or non-finite evaluation after the first one sends the iterate
/// back to the best point so far, resets the moments and halves the step.
pub fn adam_minimize<O: LogObjective>(objective: &O, start: &[f64], settings: &AdamSettings) -> Result<AdamOutcome> {
    settings.validate()?;
    let mut settings = *settings;
    let mut x = start.to_vec();
    objective.project(&mut x);
    let mut state = AdamState::new(x.len());
    let mut trace: Vec<IterRecord> = Vec::new();
    let mut best_history: Vec<f64> = Vec::new();
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    let mut failures = 0;
    let mut converged = false;

    for iter in 0..settings.max_iters {
        let eval = objective.evaluate(&x).and_then(|e| {
            if e.value.is_finite() && e.gradient.iter().all(|g| g.is_finite()) {
                Ok(e)
            } else {
                Err(CmgpError::Numerical("non-finite objective or gradient".into()))
            }
        });
        let eval = match eval {
            Ok(e) => e,
            Err(err) => {
                let Some((bx, _, _)) = &best else {
                    return Err(CmgpError::Optimization(format!("objective fails at the starting point: {err}")));
                };
                failures += 1;
                log::debug!("iteration {iter}: {err}; restarting from best iterate");
                if failures > MAX_FAILED_EVALS {
                    break;
                }
                x = bx.clone();
                state = AdamState::new(x.len());
                settings.learning_rate *= 0.5;
                continue;
            }
        };
        let grad_norm = eval.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.push(IterRecord {
            iter,
            r_hat: eval.value,
            q: eval.aux,
            grad_norm,
            params: x.iter().map(|u| u.exp()).collect(),
        });
        if best.as_ref().map_or(true, |b| eval.value < b.1) {
            best = Some((x.clone(), eval.value, iter));
        }
        let best_now = best.as_ref().unwrap().1;
        best_history.push(best_now);
        let k = best_history.len();
        if k > settings.window {
            let then = best_history[k - 1 - settings.window];
            let improvement = (then - best_now) / then.abs().max(f64::MIN_POSITIVE);
            if improvement < settings.rel_tol {
                converged = true;
                break;
            }
        }
        let delta = state.step(&eval.gradient, &settings);
        for (xj, dj) in x.iter_mut().zip(&delta) {
            *xj += dj;
        }
        objective.project(&mut x);
    }
    let Some((best_log_params, best_value, best_iter)) = best else {
        return Err(CmgpError::Optimization("no finite objective evaluation".into()));
    };
    Ok(AdamOutcome { best_log_params, best_value, best_iter, trace, converged })
}

/// Record of a CMGP hyperparameter fit.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub records: Vec<IterRecord>,
    pub initial: CmgpHyperparams,
    pub best: CmgpHyperparams,
    pub best_iter: usize,
    pub iterations_used: usize,
    pub converged: bool,
}

impl FitTrace {
    pub fn initial_r_hat(&self) -> f64 {
        self.records[0].r_hat
    }

    pub fn best_r_hat(&self) -> f64 {
        self.records[self.best_iter_position()].r_hat
    }

    fn best_iter_position(&self) -> usize {
        self.records.iter().position(|r| r.iter == self.best_iter).expect("best iterate recorded")
    }

    /// `iter,r_hat,q,grad_norm`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W, comment: Option<&str>) -> Result<()> {
        if let Some(text) = comment {
            for line in text.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        writeln!(out, "iter,r_hat,q,grad_norm")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.iter, r.r_hat, r.q, r.grad_norm)?;
        }
        Ok(())
    }
}

struct CmgpObjective<'a> {
    dataset: &'a ObservationalDataset,
    d: usize,
}

impl LogObjective for CmgpObjective<'_> {
    fn evaluate(&self, log_params: &[f64]) -> Result<Evaluation> {
        let theta = CmgpHyperparams::from_log_vector(log_params, self.d)?;
        let (value, gradient) = objective::value_and_gradient(self.dataset, &theta)?;
        Ok(Evaluation { value: value.r_hat, aux: value.q, gradient })
    }

    fn project(&self, log_params: &mut [f64]) {
        if let Ok(theta) = CmgpHyperparams::from_log_vector(log_params, self.d) {
            let projected = validate_or_project(&theta);
            if projected != theta {
                log_params.copy_from_slice(&projected.to_log_vector());
            }
        }
    }
}

/// Runs the risk-based empirical-Bayes fit. Starts from `initial`, or from
/// [`init_hyperparameters`] when absent. Returns the best visited θ.
pub fn fit(
    dataset: &ObservationalDataset,
    settings: &AdamSettings,
    initial: Option<&CmgpHyperparams>,
) -> Result<(CmgpHyperparams, FitTrace)> {
    dataset.ensure_both_arms()?;
    let theta0 = match initial {
        Some(t) => validate_or_project(t),
        None => init_hyperparameters(dataset)?,
    };
    theta0.validate()?;
    if theta0.d() != dataset.d() {
        return Err(CmgpError::InvalidInput("hyperparameter dimension does not match dataset".into()));
    }
    let obj = CmgpObjective { dataset, d: dataset.d() };
    let outcome = adam_minimize(&obj, &theta0.to_log_vector(), settings)?;
    let best = CmgpHyperparams::from_log_vector(&outcome.best_log_params, dataset.d())?;
    let trace = FitTrace {
        iterations_used: outcome.trace.len(),
        records: outcome.trace,
        initial: theta0,
        best: best.clone(),
        best_iter: outcome.best_iter,
        converged: outcome.converged,
    };
    Ok((best, trace))
}

/// Population variance, with the constant-outcome fallback of 1.
fn arm_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    if var > 0.0 && var.is_finite() {
        var
    } else {
        1.0
    }
}

/// Up-crossings of `level` by a sequence: positions with `s_j < level <= s_{j+1}`.
pub fn count_upcrossings(sequence: &[f64], level: f64) -> usize {
    sequence.windows(2).filter(|p| p[0] < level && p[1] >= level).count()
}

/// Lower clamp on initial length scales, in units of the feature's standard
/// deviation.
///
/// With many features the per-feature bound 0.05 makes every off-diagonal
/// kernel entry underflow to zero (and the length-scale gradients with it),
/// so the bound grows like `sqrt(d)/2`.
pub fn lengthscale_floor(d: usize) -> f64 {
    (0.5 * (d as f64).sqrt()).max(0.05)
}

/// Deterministic starting point from arm variances and up-crossing rates.
///
/// Per arm `w` with factual-outcome variance `s²_w`: `σ²_w = 0.1 s²_w`;
/// task-`w` variances `0.45 s²_w` in both coregionalization matrices;
/// `ρ = sqrt(b_w0 b_w1)/2`; length scale `range_k / (2π max(U, 1))` for `U`
/// up-crossings of the arm mean along feature `k`, clamped to
/// `[floor, max(10, floor)] * std_k`.
pub fn init_hyperparameters(dataset: &ObservationalDataset) -> Result<CmgpHyperparams> {
    let (c, t) = dataset.arm_counts();
    if c < 2 || t < 2 {
        return Err(CmgpError::InvalidInput(format!(
            "initialization needs at least 2 subjects per arm, got {c} controls and {t} treated"
        )));
    }
    let d = dataset.d();
    let x = dataset.features();
    let n = dataset.n();
    let floor = lengthscale_floor(d);
    let stds: Vec<f64> = (0..d)
        .map(|k| {
            let col = x.column(k);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let mut variances = [0.0; 2];
    let mut lengthscales: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for arm in 0..2u8 {
        let idx = dataset.arm_indices(arm);
        let y: Vec<f64> = idx.iter().map(|&i| dataset.outcomes()[i]).collect();
        variances[arm as usize] = arm_variance(&y);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        for k in 0..d {
            let mut order = idx.clone();
            order.sort_by(|&a, &b| x[(a, k)].total_cmp(&x[(b, k)]).then(a.cmp(&b)));
            let seq: Vec<f64> = order.iter().map(|&i| dataset.outcomes()[i]).collect();
            let crossings = count_upcrossings(&seq, mean).max(1);
            let lo = x[(order[0], k)];
            let hi = x[(*order.last().unwrap(), k)];
            let raw = (hi - lo) / (2.0 * std::f64::consts::PI * crossings as f64);
            let ell = raw.clamp(floor * stds[k], floor.max(10.0) * stds[k]);
            lengthscales[arm as usize].push(ell);
        }
    }
    let coreg = |_: usize| {
        let var0 = 0.45 * variances[0];
        let var1 = 0.45 * variances[1];
        Coregionalization { var0, var1, rho: 0.5 * (var0 * var1).sqrt() }
    };
    Ok(CmgpHyperparams {
        noise_std: [(0.1 * variances[0]).sqrt(), (0.1 * variances[1]).sqrt()],
        lengthscales,
        coreg: [coreg(0), coreg(1)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    struct Quadratic {
        target: f64,
    }

    impl LogObjective for Quadratic {
        fn evaluate(&self, u: &[f64]) -> Result<Evaluation> {
            let r = u[0] - self.target;
            Ok(Evaluation { value: r * r, aux: 0.0, gradient: vec![2.0 * r] })
        }
    }

    struct Flat;

    impl LogObjective for Flat {
        fn evaluate(&self, u: &[f64]) -> Result<Evaluation> {
            Ok(Evaluation { value: 3.0, aux: 3.0, gradient: vec![0.0; u.len()] })
        }
    }

    struct Wild;

    impl LogObjective for Wild {
        fn evaluate(&self, u: &[f64]) -> Result<Evaluation> {
            // arbitrary gradient sequence that pushes hard in both directions
            let g = (u[0] * 37.0).sin() * 1e6;
            Ok(Evaluation { value: u[0].cos(), aux: 0.0, gradient: vec![g, -g] })
        }
    }

    #[test]
    fn scalar_log_objective_converges_to_exp_c() {
        let c = 1.3;
        let settings = AdamSettings { max_iters: 500, rel_tol: 0.0, ..Default::default() };
        let out = adam_minimize(&Quadratic { target: c }, &[0.0], &settings).unwrap();
        let theta = out.best_log_params[0].exp();
        assert!((theta - c.exp()).abs() < 1e-3, "{theta}");
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let s = AdamSettings::default();
        let out = adam_minimize(&Flat, &[0.2, -1.0], &s).unwrap();
        assert!(out.converged);
        assert_eq!(out.trace.len(), s.window + 1);
        assert_eq!(out.best_log_params, vec![0.2, -1.0]);
        assert!(out.trace.iter().all(|r| r.params == vec![0.2f64.exp(), (-1.0f64).exp()]));
    }

    #[test]
    fn iterates_stay_positive() {
        let out = adam_minimize(&Wild, &[0.0, 0.0], &AdamSettings { rel_tol: 0.0, ..Default::default() }).unwrap();
        assert_eq!(out.trace.len(), 500);
        assert!(out.trace.iter().all(|r| r.params.iter().all(|p| *p > 0.0)));
    }

    #[test]
    fn first_step_bias_correction() {
        let s = AdamSettings::default();
        let mut state = AdamState::new(3);
        let g = [0.3, -2.0, 1e-4];
        let delta = state.step(&g, &s);
        for j in 0..3 {
            assert_relative_eq!(state.m_hat[j], g[j], max_relative = 1e-15);
            assert_relative_eq!(state.v_hat[j], g[j] * g[j], max_relative = 1e-12);
            assert_relative_eq!(delta[j], -s.learning_rate * g[j] / (g[j].abs() + s.epsilon), max_relative = 1e-12);
        }
    }

    #[test]
    fn upcrossings() {
        assert_eq!(count_upcrossings(&[0.0, 1.0, 0.0, 1.0], 0.5), 2);
        assert_eq!(count_upcrossings(&[1.0, 0.0], 0.5), 0);
    }

    #[test]
    fn constant_outcomes_fall_back() {
        let x = crate::dataset::make_synthetic_covariates(8, 2, 1).unwrap();
        let ds = ObservationalDataset::new(x, vec![0, 1, 0, 1, 0, 1, 0, 1], vec![2.0; 8]).unwrap();
        let t = init_hyperparameters(&ds).unwrap();
        assert_relative_eq!(t.noise_std[0].powi(2), 0.1, epsilon = 1e-15);
        assert_relative_eq!(t.noise_std[1].powi(2), 0.1, epsilon = 1e-15);
        for a in &t.coreg {
            assert_relative_eq!(a.var0, 0.45);
            assert_relative_eq!(a.var1, 0.45);
            assert!(a.rho * a.rho < a.var0 * a.var1);
        }
        t.validate().unwrap();
    }

    #[test]
    fn alternating_outcomes_hit_the_lower_clamp() {
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64);
        let w: Vec<u8> = (0..n).map(|i| ((i / 2) % 2) as u8).collect();
        let y: Vec<f64> = (0..n).map(|i| if i % 4 < 2 { 0.0 } else { 1.0 } + (i % 2) as f64 * 3.0).collect();
        let ds = ObservationalDataset::new(x.clone(), w, y).unwrap();
        let t = init_hyperparameters(&ds).unwrap();
        let col = x.column(0);
        let mean = col.mean();
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for w in 0..2 {
            assert_relative_eq!(t.lengthscales[w][0], lengthscale_floor(1) * std, max_relative = 1e-12);
        }
    }

    #[test]
    fn single_subject_arm_rejected() {
        let x = crate::dataset::make_synthetic_covariates(4, 1, 2).unwrap();
        let ds = ObservationalDataset::new(x, vec![0, 0, 0, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(init_hyperparameters(&ds).is_err());
    }

    #[test]
    fn cmgp_fit_improves_and_stays_feasible() {
        let n = 40;
        let x = crate::dataset::make_synthetic_covariates(n, 2, 4).unwrap();
        let w: Vec<u8> = (0..n).map(|i| (x[(i, 1)] > 0.5) as u8).collect();
        let y: Vec<f64> = (0..n).map(|i| (3.0 * x[(i, 0)]).sin() + w[i] as f64 * (1.0 + x[(i, 1)])).collect();
        let ds = ObservationalDataset::new(x, w, y).unwrap();
        let settings = AdamSettings { max_iters: 60, ..Default::default() };
        let (best, trace) = fit(&ds, &settings, None).unwrap();
        assert_eq!(trace.records.len(), trace.iterations_used);
        assert!(trace.best_r_hat() <= trace.initial_r_hat());
        best.validate().unwrap();
        for r in &trace.records {
            let t = CmgpHyperparams::from_vector(&r.params, 2).unwrap();
            assert!(r.params.iter().all(|p| *p > 0.0));
            assert!(t.coreg.iter().all(|a| a.is_psd()));
        }
        // determinism
        let (best2, trace2) = fit(&ds, &settings, None).unwrap();
        assert_eq!(best, best2);
        assert_eq!(trace.records, trace2.records);
    }
}
