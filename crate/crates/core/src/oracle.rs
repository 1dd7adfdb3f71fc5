//! The oracle learner: regularized empirical-PEHE minimization when both
//! potential outcomes are observed.
//!
//! The minimizer lives in the span of the effect kernel
//! `K~(x, x') = e' K(x, x') e` with `e = (-1, 1)`, and its coefficients solve
//! `(K~(X, X) + n λ I) α = Y(1) - Y(0)`. The estimation path never uses this
//! module; it is the reference the posterior is checked against.

use nalgebra::{DMatrix, DVector};

use crate::error::{CmgpError, Result};
use crate::kernel::{self, CmgpHyperparams};
use crate::linalg;

/// Fitted representer coefficients.
#[derive(Debug, Clone)]
pub struct OracleFit {
    pub alpha: Vec<f64>,
    pub lambda: f64,
    /// `K~(X, X)`.
    pub effect_kernel: DMatrix<f64>,
    /// Training features (needed to evaluate the representer at new points).
    pub features: DMatrix<f64>,
}

/// Default ridge: `1/n`, so that `n λ = 1`.
pub fn default_lambda(n: usize) -> f64 {
    1.0 / n.max(1) as f64
}

/// `(1 - 2W) ⊙ (Y^(1-W) - Y^(W))`, i.e. `Y(1) - Y(0)` for every subject.
pub fn observed_effects(treatments: &[u8], factual: &[f64], counterfactual: &[f64]) -> Result<Vec<f64>> {
    if treatments.len() != factual.len() || factual.len() != counterfactual.len() {
        return Err(CmgpError::InvalidInput(format!(
            "length mismatch: {} treatments, {} factual, {} counterfactual",
            treatments.len(),
            factual.len(),
            counterfactual.len()
        )));
    }
    Ok(treatments
        .iter()
        .zip(factual.iter().zip(counterfactual))
        .map(|(&w, (yf, ycf))| (1.0 - 2.0 * w as f64) * (ycf - yf))
        .collect())
}

/// Empirical PEHE of an estimate with counterfactuals revealed:
/// `(1/n) Σ (f1_hat(X_i) - f0_hat(X_i) - (Y_i(1) - Y_i(0)))^2`.
///
/// `estimates[i]` is `(f0_hat(X_i), f1_hat(X_i))`.
pub fn oracle_empirical_pehe(
    estimates: &[(f64, f64)],
    treatments: &[u8],
    factual: &[f64],
    counterfactual: &[f64],
) -> Result<f64> {
    let effects = observed_effects(treatments, factual, counterfactual)?;
    if estimates.len() != effects.len() {
        return Err(CmgpError::InvalidInput(format!(
            "{} estimates for {} subjects",
            estimates.len(),
            effects.len()
        )));
    }
    if effects.is_empty() {
        return Err(CmgpError::InvalidInput("no subjects".into()));
    }
    let sse: f64 = estimates.iter().zip(&effects).map(|(f, t)| (f.1 - f.0 - t).powi(2)).sum();
    Ok(sse / effects.len() as f64)
}

/// `K~(a_i, b_j)` for all pairs.
pub fn effect_kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: &CmgpHyperparams) -> DMatrix<f64> {
    let k0 = kernel::base_kernel_matrix(a, b, &theta.lengthscales[0]);
    let k1 = kernel::base_kernel_matrix(a, b, &theta.lengthscales[1]);
    let project = |c: &kernel::Coregionalization| c.var0 + c.var1 - 2.0 * c.rho;
    k0 * project(&theta.coreg[0]) + k1 * project(&theta.coreg[1])
}

pub fn oracle_fit(
    features: &DMatrix<f64>,
    treatments: &[u8],
    factual: &[f64],
    counterfactual: &[f64],
    theta: &CmgpHyperparams,
    lambda: f64,
) -> Result<OracleFit> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(CmgpError::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    theta.validate()?;
    let n = features.nrows();
    let effects = observed_effects(treatments, factual, counterfactual)?;
    if effects.len() != n {
        return Err(CmgpError::InvalidInput("features and outcomes differ in length".into()));
    }
    let effect_kernel = effect_kernel_matrix(features, features, theta);
    let mut system = effect_kernel.clone();
    for i in 0..n {
        system[(i, i)] += n as f64 * lambda;
    }
    let (chol, _) = linalg::cholesky_with_jitter(&system)?;
    let alpha = chol.solve(&DVector::from_vec(effects));
    Ok(OracleFit {
        alpha: alpha.iter().copied().collect(),
        lambda,
        effect_kernel,
        features: features.clone(),
    })
}

/// `Σ_i α_i K~(x, X_i)`.
pub fn oracle_predict(fit: &OracleFit, x: &[f64], theta: &CmgpHyperparams) -> Result<f64> {
    if x.len() != fit.features.ncols() {
        return Err(CmgpError::InvalidInput("query dimension mismatch".into()));
    }
    let q = DMatrix::from_row_slice(1, x.len(), x);
    let row = effect_kernel_matrix(&q, &fit.features, theta);
    Ok(row.iter().zip(&fit.alpha).map(|(k, a)| k * a).sum())
}

/// Regularized objective `(1/n)||K~ α - t||^2 + λ α' K~ α` at given coefficients.
pub fn regularized_objective(fit: &OracleFit, alpha: &[f64], effects: &[f64]) -> f64 {
    let n = alpha.len();
    let a = DVector::from_column_slice(alpha);
    let fitted = &fit.effect_kernel * &a;
    let resid: f64 = fitted.iter().zip(effects).map(|(f, t)| (f - t).powi(2)).sum();
    resid / n as f64 + fit.lambda * a.dot(&fitted)
}
