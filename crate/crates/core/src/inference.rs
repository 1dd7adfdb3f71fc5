//! Exact CMGP posterior.
//!
//! Training rows are held control-first internally; every per-subject vector
//! returned here is in the caller's original row order.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};
use statrs::function::erf::erf_inv;

use crate::dataset::ObservationalDataset;
use crate::error::{CmgpError, Result};
use crate::kernel::{self, CmgpHyperparams, TaskIndexedGram};
use crate::linalg;

/// Tolerance below zero before a predicted variance counts as a failure.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-8;

/// A fitted posterior at fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    theta: CmgpHyperparams,
    /// `order[r]` = original index of internal row `r`.
    order: Vec<usize>,
    features: DMatrix<f64>,
    tasks: Vec<u8>,
    outcomes: DVector<f64>,
    gram: TaskIndexedGram,
    chol: Option<Cholesky<f64, Dyn>>,
    weights: DVector<f64>,
    diag_precision: Vec<f64>,
}

/// Posterior summary of the treatment effect at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ItePrediction {
    /// `f1_hat - f0_hat`.
    pub point: f64,
    /// `(f0_hat, f1_hat)`.
    pub po_mean: (f64, f64),
    /// Posterior covariance of `(f0(x), f1(x))`.
    pub po_cov: Matrix2<f64>,
    /// `e' V e`, the posterior variance of the effect.
    pub effect_variance: f64,
    pub interval: (f64, f64),
    pub gamma: f64,
}

/// Half-width multiplier `erf^{-1}(γ) sqrt(2)`: the two-sided normal quantile.
pub fn interval_multiplier(gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CmgpError::InvalidInput(format!("coverage must be in [0, 1), got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(0.0);
    }
    Ok(erf_inv(gamma) * std::f64::consts::SQRT_2)
}

/// Fits the posterior on a dataset with both arms present.
pub fn fit_posterior(dataset: &ObservationalDataset, theta: &CmgpHyperparams) -> Result<PosteriorModel> {
    dataset.ensure_both_arms()?;
    PosteriorModel::from_parts(dataset.features(), dataset.treatments(), dataset.outcomes(), theta)
}

impl PosteriorModel {
    /// Posterior from raw arrays; unlike [`fit_posterior`] a single arm (or a
    /// single subject) is accepted.
    pub fn from_parts(
        features: &DMatrix<f64>,
        tasks: &[u8],
        outcomes: &[f64],
        theta: &CmgpHyperparams,
    ) -> Result<Self> {
        theta.validate()?;
        let n = features.nrows();
        if tasks.len() != n || outcomes.len() != n {
            return Err(CmgpError::InvalidInput("features, tasks and outcomes differ in length".into()));
        }
        let mut order: Vec<usize> = (0..n).filter(|&i| tasks[i] == 0).collect();
        order.extend((0..n).filter(|&i| tasks[i] == 1));
        let features = features.select_rows(order.iter());
        let tasks: Vec<u8> = order.iter().map(|&i| tasks[i]).collect();
        let outcomes = DVector::from_iterator(n, order.iter().map(|&i| outcomes[i]));

        let mut gram = kernel::training_gram(&features, &tasks, theta)?;
        let mut system = gram.matrix.clone();
        for i in 0..n {
            system[(i, i)] += theta.noise_var(tasks[i]);
        }
        let (chol, jitter) = linalg::cholesky_with_jitter(&system)?;
        gram.jitter_used = jitter;
        let weights = chol.solve(&outcomes);
        let diag_precision = linalg::inverse_diagonal(&chol);
        Ok(Self {
            theta: theta.clone(),
            order,
            features,
            tasks,
            outcomes,
            gram,
            chol: Some(chol),
            weights,
            diag_precision,
        })
    }

    /// A model with no training data: predictions fall back to the prior.
    pub fn prior(theta: &CmgpHyperparams) -> Result<Self> {
        theta.validate()?;
        let d = theta.d();
        Ok(Self {
            theta: theta.clone(),
            order: Vec::new(),
            features: DMatrix::zeros(0, d),
            tasks: Vec::new(),
            outcomes: DVector::zeros(0),
            gram: TaskIndexedGram { matrix: DMatrix::zeros(0, 0), tasks: Vec::new(), jitter_used: 0.0 },
            chol: None,
            weights: DVector::zeros(0),
            diag_precision: Vec::new(),
        })
    }

    pub fn theta(&self) -> &CmgpHyperparams {
        &self.theta
    }

    pub fn n(&self) -> usize {
        self.tasks.len()
    }

    pub fn gram(&self) -> &TaskIndexedGram {
        &self.gram
    }

    /// Lower-triangular factor `L` with `L L' = K + Σ + jitter I` (internal order).
    pub fn factor(&self) -> Option<DMatrix<f64>> {
        self.chol.as_ref().map(|c| c.l())
    }

    /// `(K + Σ)^{-1} Y`, original row order.
    pub fn weights(&self) -> Vec<f64> {
        self.to_original(self.weights.as_slice())
    }

    /// Diagonal of `(K + Σ)^{-1}`, original row order.
    pub fn diag_precision(&self) -> Vec<f64> {
        self.to_original(&self.diag_precision)
    }

    /// `K + Σ` as factorized (including any jitter), internal order.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let mut m = self.gram.matrix.clone();
        for i in 0..self.n() {
            m[(i, i)] += self.theta.noise_var(self.tasks[i]) + self.gram.jitter_used;
        }
        m
    }

    /// Internal-order row permutation (`order[r]` = original index).
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn to_original(&self, internal: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; internal.len()];
        for (r, &i) in self.order.iter().enumerate() {
            out[i] = internal[r];
        }
        out
    }

    /// Posterior mean `(f0_hat(x), f1_hat(x))` only; O(n d).
    pub fn predict_mean(&self, x: &[f64]) -> Result<(f64, f64)> {
        if self.n() == 0 {
            return Ok((0.0, 0.0));
        }
        let c = kernel::cross_covariance(x, &self.features, &self.tasks, &self.theta)?;
        let m = &c * &self.weights;
        Ok((m[0], m[1]))
    }

    /// Effect estimate, posterior covariance and credible interval at `x`.
    pub fn predict(&self, x: &[f64], gamma: f64) -> Result<ItePrediction> {
        let mult = interval_multiplier(gamma)?;
        let prior = kernel::lmc_block(x, x, &self.theta)?;
        let (po_mean, mut cov) = match &self.chol {
            None => ((0.0, 0.0), prior),
            Some(chol) => {
                let c = kernel::cross_covariance(x, &self.features, &self.tasks, &self.theta)?;
                let m = &c * &self.weights;
                let mut s = c.transpose();
                chol.l_dirty().solve_lower_triangular_mut(&mut s);
                let explained = s.transpose() * &s;
                let v = Matrix2::new(
                    prior[(0, 0)] - explained[(0, 0)],
                    prior[(0, 1)] - explained[(0, 1)],
                    prior[(1, 0)] - explained[(1, 0)],
                    prior[(1, 1)] - explained[(1, 1)],
                );
                ((m[0], m[1]), v)
            }
        };
        cov = (cov + cov.transpose()) * 0.5;
        let mut effect_variance = cov[(0, 0)] + cov[(1, 1)] - 2.0 * cov[(0, 1)];
        if effect_variance < -NEGATIVE_VARIANCE_TOL {
            return Err(CmgpError::Numerical(format!(
                "negative posterior effect variance {effect_variance:e}"
            )));
        }
        effect_variance = effect_variance.max(0.0);
        for t in 0..2 {
            cov[(t, t)] = cov[(t, t)].max(0.0);
        }
        let point = po_mean.1 - po_mean.0;
        let half = mult * effect_variance.sqrt();
        Ok(ItePrediction {
            point,
            po_mean,
            po_cov: cov,
            effect_variance,
            interval: (point - half, point + half),
            gamma,
        })
    }

    /// Predictions for every row of `features`.
    pub fn predict_rows(&self, features: &DMatrix<f64>, gamma: f64) -> Result<Vec<ItePrediction>> {
        (0..features.nrows()).map(|i| self.predict(&kernel::row_vec(features, i), gamma)).collect()
    }

    /// Posterior variance of each subject's unobserved counterfactual outcome,
    /// `[V(X_i)]_{1-W_i, 1-W_i} + σ²_{1-W_i}`, in original order.
    pub fn counterfactual_variances(&self) -> Result<Vec<f64>> {
        let n = self.n();
        if n == 0 {
            return Ok(Vec::new());
        }
        let chol = self.chol.as_ref().expect("fitted model");
        let flipped: Vec<u8> = self.tasks.iter().map(|&w| 1 - w).collect();
        let base = [
            kernel::base_kernel_gram(&self.features, &self.theta.lengthscales[0]),
            kernel::base_kernel_gram(&self.features, &self.theta.lengthscales[1]),
        ];
        // row i: covariance of f_{1-W_i}(X_i) with the observed latent values
        let cross = kernel::assemble_gram(&base, &flipped, &self.tasks, &self.theta);
        let mut s = cross.transpose();
        chol.l_dirty().solve_lower_triangular_mut(&mut s);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let cf = flipped[i];
            let latent = self.theta.prior_variance(cf) - s.column(i).norm_squared();
            if latent < -NEGATIVE_VARIANCE_TOL {
                return Err(CmgpError::Numerical(format!(
                    "negative counterfactual variance {latent:e} for subject {}",
                    self.order[i]
                )));
            }
            out.push(latent.max(0.0) + self.theta.noise_var(cf));
        }
        Ok(self.to_original(&out))
    }

    /// Closed-form leave-one-out means `E[f_{W_i}(X_i) | D_{-i}] = Y_i - w_i / P_ii`,
    /// original order.
    pub fn loo_means(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n());
        for r in 0..self.n() {
            let p = self.diag_precision[r];
            if !(p > 0.0) {
                return Err(CmgpError::Numerical(format!(
                    "non-positive precision diagonal {p:e} for subject {}",
                    self.order[r]
                )));
            }
            out.push(self.outcomes[r] - self.weights[r] / p);
        }
        Ok(self.to_original(&out))
    }
}

/// Writes `id,t_hat,f0_hat,f1_hat,var_t,lo,hi` rows; `ids` default to row index.
pub fn write_predictions_csv<W: Write>(
    out: &mut W,
    predictions: &[ItePrediction],
    comment: Option<&str>,
) -> Result<()> {
    if let Some(text) = comment {
        for line in text.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "id,t_hat,f0_hat,f1_hat,var_t,lo,hi")?;
    for (i, p) in predictions.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{}",
            p.point, p.po_mean.0, p.po_mean.1, p.effect_variance, p.interval.0, p.interval.1
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Coregionalization;
    use approx::assert_relative_eq;

    fn theta(d: usize) -> CmgpHyperparams {
        CmgpHyperparams {
            noise_std: [0.3, 0.5],
            lengthscales: [vec![0.6; d], vec![0.9; d]],
            coreg: [
                Coregionalization { var0: 1.0, var1: 0.5, rho: 0.4 },
                Coregionalization { var0: 0.3, var1: 0.8, rho: 0.2 },
            ],
        }
    }

    fn random_instance(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<u8>, Vec<f64>) {
        let x = crate::dataset::make_synthetic_covariates(n, d, seed).unwrap();
        let w: Vec<u8> = (0..n).map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8).collect();
        let y: Vec<f64> = (0..n).map(|i| (3.0 * x[(i, 0)]).sin() + w[i] as f64).collect();
        (x, w, y)
    }

    #[test]
    fn single_subject_weight() {
        let t = theta(1);
        let m = PosteriorModel::from_parts(&DMatrix::from_element(1, 1, 0.2), &[0], &[2.0], &t).unwrap();
        assert_relative_eq!(m.weights()[0], 2.0 / (1.0 + 0.3 + 0.09), epsilon = 1e-14);
        // empty conditioning set: LOO mean is the prior mean
        assert_relative_eq!(m.loo_means().unwrap()[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn weights_solve_the_system() {
        let (x, w, y) = random_instance(25, 3, 4);
        let t = theta(3);
        let m = PosteriorModel::from_parts(&x, &w, &y, &t).unwrap();
        let mut k = kernel::training_gram(&x, &w, &t).unwrap().matrix;
        for i in 0..25 {
            k[(i, i)] += t.noise_var(w[i]);
        }
        let y = DVector::from_vec(y);
        let resid = &k * DVector::from_vec(m.weights()) - &y;
        assert!(resid.norm() / y.norm() < 1e-8);
        // dense-inverse oracle
        let dense = k.clone().try_inverse().unwrap() * &y;
        for (a, b) in m.weights().iter().zip(dense.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-9, max_relative = 1e-9);
        }
        // factorization reproduces K + Σ
        let l = m.factor().unwrap();
        let sys = m.system_matrix();
        assert!((&l * l.transpose() - &sys).norm() / sys.norm() < 1e-8);
    }

    #[test]
    fn prior_fallback_and_zero_width() {
        let t = theta(2);
        let m = PosteriorModel::prior(&t).unwrap();
        let p = m.predict(&[0.3, 0.1], 0.9).unwrap();
        assert_eq!(p.point, 0.0);
        assert_eq!(p.po_cov, t.coreg[0].matrix() + t.coreg[1].matrix());
        let p0 = m.predict(&[0.3, 0.1], 0.0).unwrap();
        assert_eq!(p0.interval, (0.0, 0.0));
        assert!(m.predict(&[0.3, 0.1], 1.0).is_err());
    }

    #[test]
    fn normal_quantile_multiplier() {
        // Φ^{-1}(0.975) = 1.959963984540054
        assert_relative_eq!(interval_multiplier(0.95).unwrap(), 1.959_963_984_540_054, epsilon = 1e-12);
        assert_relative_eq!(statrs::function::erf::erf(1.959_963_984_540_054 / 2f64.sqrt()), 0.95, epsilon = 1e-11);
    }

    #[test]
    fn prediction_invariants() {
        let (x, w, y) = random_instance(30, 2, 9);
        let t = theta(2);
        let m = PosteriorModel::from_parts(&x, &w, &y, &t).unwrap();
        let prior_effect = {
            let a = t.coreg[0].matrix() + t.coreg[1].matrix();
            a[(0, 0)] + a[(1, 1)] - 2.0 * a[(0, 1)]
        };
        for q in [[0.1, 0.2], [0.5, 0.5], [3.0, -1.0]] {
            let p = m.predict(&q, 0.8).unwrap();
            assert!((p.point - (p.po_mean.1 - p.po_mean.0)).abs() <= 1e-12);
            assert!(p.interval.0 <= p.point && p.point <= p.interval.1);
            assert!(p.effect_variance <= prior_effect + 1e-8);
            assert!((p.po_cov - p.po_cov.transpose()).amax() < 1e-12);
            let narrow = m.predict(&q, 0.5).unwrap();
            assert!(narrow.interval.0 >= p.interval.0 && narrow.interval.1 <= p.interval.1);
            let mean = m.predict_mean(&q).unwrap();
            assert_relative_eq!(mean.0, p.po_mean.0, epsilon = 1e-12);
            assert_eq!(m.predict(&q, 0.8).unwrap(), p);
        }
    }

    #[test]
    fn decorrelated_counterfactual_variance_is_prior() {
        let mut t = theta(1);
        t.coreg[0].rho = 0.0;
        t.coreg[1].rho = 0.0;
        // treated subjects far from controls
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.1, 50.0, 50.1]);
        let w = [0u8, 0, 1, 1];
        let m = PosteriorModel::from_parts(&x, &w, &[1.0, 2.0, 3.0, 4.0], &t).unwrap();
        let cf = m.counterfactual_variances().unwrap();
        assert_relative_eq!(cf[0], t.prior_variance(1) + t.noise_var(1), epsilon = 1e-12);
        assert_relative_eq!(cf[2], t.prior_variance(0) + t.noise_var(0), epsilon = 1e-12);
    }

    #[test]
    fn informative_twin_shrinks_counterfactual_variance() {
        // f0 and f1 identical processes (rank-one A, k0 = k1), twin observed in the other arm
        let t = CmgpHyperparams {
            noise_std: [1e-4, 1e-4],
            lengthscales: [vec![1.0], vec![1.0]],
            coreg: [
                Coregionalization { var0: 1.0, var1: 1.0, rho: 0.999_999 },
                Coregionalization { var0: 1e-6, var1: 1e-6, rho: 1e-12 },
            ],
        };
        let x = DMatrix::from_row_slice(2, 1, &[0.3, 0.3]);
        let m = PosteriorModel::from_parts(&x, &[0, 1], &[1.0, 1.0], &t).unwrap();
        let cf = m.counterfactual_variances().unwrap();
        for v in cf {
            assert!(v < 1e-5, "{v}");
            assert!(v >= t.noise_var(0));
        }
    }

    #[test]
    fn predictions_csv_header() {
        let t = theta(1);
        let m = PosteriorModel::prior(&t).unwrap();
        let p = m.predict(&[0.0], 0.9).unwrap();
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &[p], None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,t_hat,f0_hat,f1_hat,var_t,lo,hi\n0,0,"));
    }
}
