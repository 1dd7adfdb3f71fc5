//! Risk-based empirical-Bayes objective.
//!
//! `Q(θ) = Σ_i Var[Y_i^(1-W_i) | D] + Σ_i (Y_i - E[f_{W_i}(X_i) | D_{-i}])^2`
//! and, after integrating out the two regularization weights under Jeffreys
//! priors, `R(θ) = n log Q(θ) + (10 + 2d) log ||θ||^2`.
//!
//! The gradient is computed analytically by back-propagating through
//! `P = (K + Σ)^{-1}`: one O(n^3) pass yields `∂Q/∂(K + Σ)` and
//! `∂Q/∂K_cross`, which are then contracted against the kernel derivatives
//! of every log-parameter in O(n^2 d).

use nalgebra::{DMatrix, DVector};

use crate::dataset::ObservationalDataset;
use crate::error::{CmgpError, Result};
use crate::inference::fit_posterior;
use crate::kernel::{self, CmgpHyperparams};
use crate::linalg;

/// Components of the objective at one θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub q: f64,
    pub r_hat: f64,
    pub factual_loo_sse: f64,
    pub cf_variance_l1: f64,
    pub theta_norm_sq: f64,
}

impl ObjectiveValue {
    fn assemble(n: usize, factual_loo_sse: f64, cf_variance_l1: f64, theta: &CmgpHyperparams) -> Result<Self> {
        let q = cf_variance_l1 + factual_loo_sse;
        let theta_norm_sq = theta.norm_sq();
        let r_hat = n as f64 * q.ln() + theta.norm_terms() as f64 * theta_norm_sq.ln();
        if !(q > 0.0) || !r_hat.is_finite() {
            return Err(CmgpError::Numerical(format!("objective not finite: Q = {q}, R = {r_hat}")));
        }
        Ok(Self { q, r_hat, factual_loo_sse, cf_variance_l1, theta_norm_sq })
    }
}

/// Evaluates the objective through the posterior model (closed-form LOO means
/// and counterfactual variances).
pub fn evaluate_objective(dataset: &ObservationalDataset, theta: &CmgpHyperparams) -> Result<ObjectiveValue> {
    let model = fit_posterior(dataset, theta)?;
    let cf = model.counterfactual_variances()?;
    let loo = model.loo_means()?;
    let sse: f64 = dataset.outcomes().iter().zip(&loo).map(|(y, m)| (y - m).powi(2)).sum();
    let l1: f64 = cf.iter().sum();
    ObjectiveValue::assemble(dataset.n(), sse, l1, theta)
}

/// Gradient of `R` with respect to the log of every natural parameter, in
/// [`CmgpHyperparams::to_vector`] order.
pub fn gradient_log_space(dataset: &ObservationalDataset, theta: &CmgpHyperparams) -> Result<Vec<f64>> {
    value_and_gradient(dataset, theta).map(|(_, g)| g)
}

/// Objective value and analytic log-space gradient from a single factorization.
pub fn value_and_gradient(
    dataset: &ObservationalDataset,
    theta: &CmgpHyperparams,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    dataset.ensure_both_arms()?;
    theta.validate()?;
    if dataset.d() != theta.d() {
        return Err(CmgpError::InvalidInput(format!(
            "dataset has {} features, hyperparameters expect {}",
            dataset.d(),
            theta.d()
        )));
    }
    let x = dataset.features();
    let w = dataset.treatments();
    let n = dataset.n();
    let d = dataset.d();
    let flipped: Vec<u8> = w.iter().map(|&t| 1 - t).collect();

    let base = [
        kernel::base_kernel_gram(x, &theta.lengthscales[0]),
        kernel::base_kernel_gram(x, &theta.lengthscales[1]),
    ];
    let mut system = kernel::assemble_gram(&base, w, w, theta);
    for i in 0..n {
        system[(i, i)] += theta.noise_var(w[i]);
    }
    let cross = kernel::assemble_gram(&base, &flipped, w, theta);

    let (chol, _) = linalg::cholesky_with_jitter(&system)?;
    let precision = linalg::spd_inverse(&chol);
    let y = DVector::from_column_slice(dataset.outcomes());
    let alpha = &precision * &y;

    // factual LOO residuals r_i = α_i / P_ii
    let mut sse = 0.0;
    let mut a = DVector::zeros(n);
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let p = precision[(i, i)];
        if !(p > 0.0) {
            return Err(CmgpError::Numerical(format!("non-positive precision diagonal at {i}")));
        }
        let r = alpha[i] / p;
        sse += r * r;
        a[i] = 2.0 * r / p;
        b[i] = 2.0 * r * r / p;
    }

    // counterfactual variances: c_i - (K_c P K_c')_ii + σ²
    let cp = &cross * &precision;
    let mut l1 = 0.0;
    for i in 0..n {
        let explained = cp.row(i).dot(&cross.row(i));
        l1 += theta.prior_variance(flipped[i]) - explained + theta.noise_var(flipped[i]);
    }
    let value = ObjectiveValue::assemble(n, sse, l1, theta)?;

    // dQ/d(K+Σ) = -(P a) α' + P diag(b) P + (K_c P)' (K_c P), symmetrized
    let pa = &precision * &a;
    // P diag(b) P = (diag(√b) P)' (diag(√b) P)
    let mut pb = precision.clone();
    for j in 0..n {
        let s = b[j].sqrt();
        pb.row_mut(j).scale_mut(s);
    }
    let mut g_sys = pb.transpose() * &pb;
    g_sys += cp.transpose() * &cp;
    g_sys.ger(-0.5, &pa, &alpha, 1.0);
    g_sys.ger(-0.5, &alpha, &pa, 1.0);
    // dQ/dK_c = -2 K_c P
    let g_cross = cp * -2.0;

    let mut grad_q = vec![0.0; theta.n_params()];

    // noise: ∂(σ²)/∂log σ = 2σ²
    for t in 0..2u8 {
        let s2 = theta.noise_var(t);
        let diag: f64 = (0..n).filter(|&i| w[i] == t).map(|i| g_sys[(i, i)]).sum();
        let direct = flipped.iter().filter(|&&f| f == t).count() as f64;
        grad_q[t as usize] = 2.0 * s2 * (diag + direct);
    }

    let coreg_offset = 2 + 2 * d;
    for comp in 0..2usize {
        let kw = &base[comp];
        let aw = &theta.coreg[comp];
        // H_kl = ∂Q/∂k_w(X_k, X_l) weighted by k_w, and task-block sums
        let mut h = DMatrix::zeros(n, n);
        let mut sys_blocks = [[0.0; 2]; 2];
        let mut cross_blocks = [[0.0; 2]; 2];
        for l in 0..n {
            for k in 0..n {
                let kv = kw[(k, l)];
                let gs = g_sys[(k, l)] * kv;
                let gc = g_cross[(k, l)] * kv;
                sys_blocks[w[k] as usize][w[l] as usize] += gs;
                cross_blocks[flipped[k] as usize][w[l] as usize] += gc;
                h[(k, l)] = gs * aw.entry(w[k], w[l]) + gc * aw.entry(flipped[k], w[l]);
            }
        }
        // Σ_kl H_kl (x_km - x_lm)^2 = Σ_k x_km^2 (rowsum_k + colsum_k) - 2 x_m' H x_m
        let row_sums = h.column_sum();
        let col_sums = h.row_sum().transpose();
        let hx = &h * x;
        let hsym_x = h.transpose() * x;
        for m in 0..d {
            let ell = theta.lengthscales[comp][m];
            let mut acc = 0.0;
            for k in 0..n {
                let xv = x[(k, m)];
                acc += xv * xv * (row_sums[k] + col_sums[k]) - xv * (hx[(k, m)] + hsym_x[(k, m)]);
            }
            grad_q[2 + comp * d + m] = acc / (ell * ell);
        }
        let cf_count = |t: u8| flipped.iter().filter(|&&f| f == t).count() as f64;
        let base_idx = coreg_offset + 3 * comp;
        grad_q[base_idx] = aw.var0 * (sys_blocks[0][0] + cross_blocks[0][0] + cf_count(0));
        grad_q[base_idx + 1] = aw.var1 * (sys_blocks[1][1] + cross_blocks[1][1] + cf_count(1));
        grad_q[base_idx + 2] = aw.rho
            * (sys_blocks[0][1] + sys_blocks[1][0] + cross_blocks[0][1] + cross_blocks[1][0]);
    }

    // chain into R = n log Q + m log ||θ||²
    let natural = theta.to_vector();
    let terms = theta.norm_terms() as f64;
    let mut grad = Vec::with_capacity(natural.len());
    for (j, (&gq, &v)) in grad_q.iter().zip(&natural).enumerate() {
        let mult = if j >= coreg_offset && (j - coreg_offset) % 3 == 2 { 2.0 } else { 1.0 };
        let g = n as f64 / value.q * gq + terms / value.theta_norm_sq * 2.0 * mult * v * v;
        if !g.is_finite() {
            return Err(CmgpError::Numerical(format!("gradient component {j} is not finite")));
        }
        grad.push(g);
    }
    Ok((value, grad))
}

/// Central differences of `R` in log-parameter space.
pub fn finite_difference_gradient(
    dataset: &ObservationalDataset,
    theta: &CmgpHyperparams,
    step: f64,
) -> Result<Vec<f64>> {
    let base = theta.to_log_vector();
    let d = theta.d();
    let mut grad = Vec::with_capacity(base.len());
    for j in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[j] += step;
        minus[j] -= step;
        let fp = evaluate_objective(dataset, &CmgpHyperparams::from_log_vector(&plus, d)?)?.r_hat;
        let fm = evaluate_objective(dataset, &CmgpHyperparams::from_log_vector(&minus, d)?)?.r_hat;
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}

/// One row of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub ok: bool,
}

/// Finite-difference step used by gradient checks.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Relative tolerance per component.
pub const GRADCHECK_REL_TOL: f64 = 1e-3;
/// Absolute floor below which differences always pass.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;

/// Compares a supplied gradient against central differences.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], d: usize) -> Vec<GradcheckRow> {
    let names = CmgpHyperparams::parameter_names(d);
    analytic
        .iter()
        .zip(numeric)
        .zip(names)
        .map(|((&a, &f), name)| {
            let abs_err = (a - f).abs();
            let rel_err = abs_err / a.abs().max(f.abs()).max(f64::MIN_POSITIVE);
            let ok = abs_err <= GRADCHECK_ABS_FLOOR || rel_err <= GRADCHECK_REL_TOL;
            GradcheckRow { name, analytic: a, numeric: f, abs_err, rel_err, ok }
        })
        .collect()
}

/// Full gradient check of [`gradient_log_space`] at one `(dataset, θ)`.
pub fn gradcheck(dataset: &ObservationalDataset, theta: &CmgpHyperparams) -> Result<Vec<GradcheckRow>> {
    let analytic = gradient_log_space(dataset, theta)?;
    let numeric = finite_difference_gradient(dataset, theta, GRADCHECK_STEP)?;
    Ok(compare_gradients(&analytic, &numeric, theta.d()))
}
