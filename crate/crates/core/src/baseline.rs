//! Naive benchmark: one zero-mean GP per arm, hyperparameters by evidence
//! maximization, ITE as the difference of the two posterior means.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dataset::ObservationalDataset;
use crate::error::{CmgpError, Result};
use crate::kernel;
use crate::linalg;
use crate::optimizer::{adam_minimize, AdamSettings, Evaluation, LogObjective};

/// RBF-ARD kernel hyperparameters of a single-output GP.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleTaskParams {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl SingleTaskParams {
    /// `ℓ[..], signal_var, noise_var`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.lengthscales.clone();
        v.extend([self.signal_var, self.noise_var]);
        v
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(CmgpError::InvalidInput(format!("need at least 3 parameters, got {}", v.len())));
        }
        let d = v.len() - 2;
        let p = Self { lengthscales: v[..d].to_vec(), signal_var: v[d], noise_var: v[d + 1] };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_vector().iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(CmgpError::InvalidInput(format!("GP parameters must be positive and finite: {self:?}")))
        }
    }
}

/// A fitted single-output GP regression.
#[derive(Debug, Clone)]
pub struct SingleTaskGP {
    pub params: SingleTaskParams,
    features: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

impl SingleTaskGP {
    /// Conditions on `(features, outcomes)` at fixed parameters.
    pub fn condition(features: &DMatrix<f64>, outcomes: &[f64], params: SingleTaskParams) -> Result<Self> {
        params.validate()?;
        if features.nrows() != outcomes.len() || features.nrows() == 0 {
            return Err(CmgpError::InvalidInput("features and outcomes must be non-empty and aligned".into()));
        }
        if features.ncols() != params.lengthscales.len() {
            return Err(CmgpError::InvalidInput("length scales do not match feature dimension".into()));
        }
        let mut k = kernel::base_kernel_gram(features, &params.lengthscales) * params.signal_var;
        for i in 0..k.nrows() {
            k[(i, i)] += params.noise_var;
        }
        let (chol, _) = linalg::cholesky_with_jitter(&k)?;
        let weights = chol.solve(&DVector::from_column_slice(outcomes));
        Ok(Self { params, features: features.clone(), chol, weights })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    /// Posterior mean `k*' (K + σ²I)^{-1} y`.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.features.ncols() {
            return Err(CmgpError::InvalidInput("query dimension mismatch".into()));
        }
        let mut acc = 0.0;
        for i in 0..self.n() {
            let row = kernel::row_vec(&self.features, i);
            acc += self.weights[i] * kernel::rbf_unchecked(x, &row, &self.params.lengthscales);
        }
        Ok(self.params.signal_var * acc)
    }

    /// Negative log marginal likelihood of the conditioning data.
    pub fn neg_log_marginal_likelihood(&self, outcomes: &[f64]) -> f64 {
        let y = DVector::from_column_slice(outcomes);
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        0.5 * y.dot(&self.weights) + 0.5 * log_det + 0.5 * self.n() as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Negative log marginal likelihood and its gradient with respect to the log
/// of every parameter: `∂/∂θ = ½ tr((P - αα') ∂K/∂θ)`.
pub fn nlml_and_gradient(features: &DMatrix<f64>, outcomes: &[f64], params: &SingleTaskParams) -> Result<(f64, Vec<f64>)> {
    let gp = SingleTaskGP::condition(features, outcomes, params.clone())?;
    let value = gp.neg_log_marginal_likelihood(outcomes);
    let n = gp.n();
    let d = features.ncols();
    let kbase = kernel::base_kernel_gram(features, &params.lengthscales);
    let mut g = linalg::spd_inverse(&gp.chol);
    g.ger(-1.0, &gp.weights, &gp.weights, 1.0);
    g *= 0.5;

    let mut grad = vec![0.0; d + 2];
    // H = G ⊙ s k, symmetric
    let h = g.component_mul(&kbase) * params.signal_var;
    let sums = h.column_sum();
    let hx = &h * features;
    for m in 0..d {
        let ell = params.lengthscales[m];
        let mut acc = 0.0;
        for k in 0..n {
            let xv = features[(k, m)];
            acc += 2.0 * xv * xv * sums[k] - 2.0 * xv * hx[(k, m)];
        }
        grad[m] = acc / (ell * ell);
    }
    grad[d] = h.sum();
    grad[d + 1] = params.noise_var * g.trace();
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(CmgpError::Numerical("marginal likelihood not finite".into()));
    }
    Ok((value, grad))
}

struct Evidence<'a> {
    features: &'a DMatrix<f64>,
    outcomes: &'a [f64],
}

impl LogObjective for Evidence<'_> {
    fn evaluate(&self, log_params: &[f64]) -> Result<Evaluation> {
        let nat: Vec<f64> = log_params.iter().map(|v| v.exp()).collect();
        let params = SingleTaskParams::from_vector(&nat)?;
        let (value, gradient) = nlml_and_gradient(self.features, self.outcomes, &params)?;
        Ok(Evaluation { value, aux: value, gradient })
    }
}

/// Starting point: per-feature standard deviations, 90/10 signal/noise split
/// of the outcome variance.
pub fn init_single_task(features: &DMatrix<f64>, outcomes: &[f64]) -> SingleTaskParams {
    let n = features.nrows() as f64;
    let lengthscales = (0..features.ncols())
        .map(|k| {
            let col = features.column(k);
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mean = outcomes.iter().sum::<f64>() / n;
    let var = outcomes.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let var = if var > 0.0 && var.is_finite() { var } else { 1.0 };
    SingleTaskParams { lengthscales, signal_var: 0.9 * var, noise_var: 0.1 * var }
}

/// Evidence-maximizing fit of one arm.
#[derive(Debug, Clone)]
pub struct ArmFit {
    pub gp: SingleTaskGP,
    pub initial: SingleTaskParams,
    pub initial_nlml: f64,
    pub best_nlml: f64,
    pub iterations_used: usize,
}

pub fn fit_single_task(features: &DMatrix<f64>, outcomes: &[f64], settings: &AdamSettings) -> Result<ArmFit> {
    if features.nrows() < 2 {
        return Err(CmgpError::InvalidInput(format!("an arm needs at least 2 subjects, got {}", features.nrows())));
    }
    let initial = init_single_task(features, outcomes);
    let start: Vec<f64> = initial.to_vector().iter().map(|v| v.ln()).collect();
    let outcome = adam_minimize(&Evidence { features, outcomes }, &start, settings)?;
    let nat: Vec<f64> = outcome.best_log_params.iter().map(|v| v.exp()).collect();
    let gp = SingleTaskGP::condition(features, outcomes, SingleTaskParams::from_vector(&nat)?)?;
    Ok(ArmFit {
        gp,
        initial,
        initial_nlml: outcome.trace[0].r_hat,
        best_nlml: outcome.best_value,
        iterations_used: outcome.trace.len(),
    })
}

/// Control-arm and treated-arm fits.
#[derive(Debug, Clone)]
pub struct NaiveGpPair {
    pub control: ArmFit,
    pub treated: ArmFit,
}

impl NaiveGpPair {
    /// `f1_hat(x) - f0_hat(x)`.
    pub fn predict_ite(&self, x: &[f64]) -> Result<f64> {
        let (f0, f1) = self.predict_outcomes(x)?;
        Ok(f1 - f0)
    }

    pub fn predict_outcomes(&self, x: &[f64]) -> Result<(f64, f64)> {
        Ok((self.control.gp.predict_mean(x)?, self.treated.gp.predict_mean(x)?))
    }
}

/// Fits the two arms independently (concurrently).
pub fn fit_naive_gp(dataset: &ObservationalDataset, settings: &AdamSettings) -> Result<NaiveGpPair> {
    settings.validate()?;
    let arm = |w: u8| {
        let idx = dataset.arm_indices(w);
        let sub = dataset.select(&idx);
        fit_single_task(sub.features(), sub.outcomes(), settings)
    };
    let (control, treated) = rayon::join(|| arm(0), || arm(1));
    Ok(NaiveGpPair { control: control?, treated: treated? })
}

pub fn predict_naive_ite(pair: &NaiveGpPair, x: &[f64]) -> Result<f64> {
    pair.predict_ite(x)
}
