//! RBF-ARD base kernels and the two-output linear model of coregionalization
//!
//! `K(x, x') = A0 k0(x, x') + A1 k1(x, x')` with
//! `A_w = [[b_w0, rho_w], [rho_w, b_w1]]` and `k_w` an RBF kernel with
//! per-feature length scales. Row/column index of `A_w` is the task
//! (0 = control outcome, 1 = treated outcome).

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{CmgpError, Result};

/// One coregionalization matrix `[[var0, rho], [rho, var1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coregionalization {
    /// Variance contributed to task 0.
    pub var0: f64,
    /// Variance contributed to task 1.
    pub var1: f64,
    /// Cross-task covariance.
    pub rho: f64,
}

impl Coregionalization {
    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.var0, self.rho, self.rho, self.var1)
    }

    /// Entry `(task_a, task_b)`.
    #[inline]
    pub fn entry(&self, task_a: u8, task_b: u8) -> f64 {
        match (task_a, task_b) {
            (0, 0) => self.var0,
            (1, 1) => self.var1,
            _ => self.rho,
        }
    }

    pub fn var(&self, task: u8) -> f64 {
        if task == 0 {
            self.var0
        } else {
            self.var1
        }
    }

    pub fn is_psd(&self) -> bool {
        self.var0 >= 0.0 && self.var1 >= 0.0 && self.rho * self.rho <= self.var0 * self.var1
    }
}

/// Full hyperparameter set: noise levels, two length-scale vectors and two
/// coregionalization matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CmgpHyperparams {
    /// `(σ0, σ1)`: outcome noise standard deviation per task.
    pub noise_std: [f64; 2],
    /// Length scales of `k0` and `k1`.
    pub lengthscales: [Vec<f64>; 2],
    /// `A0` and `A1`.
    pub coreg: [Coregionalization; 2],
}

/// Flat JSON layout of [`CmgpHyperparams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HyperparamsJson {
    sigma0: f64,
    sigma1: f64,
    ell0: Vec<f64>,
    ell1: Vec<f64>,
    b00: f64,
    b01: f64,
    rho0: f64,
    b10: f64,
    b11: f64,
    rho1: f64,
}

impl Serialize for CmgpHyperparams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        HyperparamsJson {
            sigma0: self.noise_std[0],
            sigma1: self.noise_std[1],
            ell0: self.lengthscales[0].clone(),
            ell1: self.lengthscales[1].clone(),
            b00: self.coreg[0].var0,
            b01: self.coreg[0].var1,
            rho0: self.coreg[0].rho,
            b10: self.coreg[1].var0,
            b11: self.coreg[1].var1,
            rho1: self.coreg[1].rho,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CmgpHyperparams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = HyperparamsJson::deserialize(d)?;
        Ok(Self {
            noise_std: [j.sigma0, j.sigma1],
            lengthscales: [j.ell0, j.ell1],
            coreg: [
                Coregionalization { var0: j.b00, var1: j.b01, rho: j.rho0 },
                Coregionalization { var0: j.b10, var1: j.b11, rho: j.rho1 },
            ],
        })
    }
}

impl CmgpHyperparams {
    pub fn d(&self) -> usize {
        self.lengthscales[0].len()
    }

    /// Number of free parameters: `8 + 2d`.
    pub fn n_params(&self) -> usize {
        8 + 2 * self.d()
    }

    /// Checks positivity, equal length-scale dimensions and PSD of `A0`, `A1`.
    pub fn validate(&self) -> Result<()> {
        let d = self.lengthscales[0].len();
        if d == 0 || self.lengthscales[1].len() != d {
            return Err(CmgpError::InvalidInput(format!(
                "length-scale vectors must be non-empty and equal length, got {} and {}",
                d,
                self.lengthscales[1].len()
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.noise_std.iter().all(|&s| positive(s)) {
            return Err(CmgpError::InvalidInput(format!(
                "noise std must be positive: {:?}",
                self.noise_std
            )));
        }
        if !self.lengthscales.iter().flatten().all(|&l| positive(l)) {
            return Err(CmgpError::InvalidInput("length scales must be positive".into()));
        }
        for (w, a) in self.coreg.iter().enumerate() {
            if !positive(a.var0) || !positive(a.var1) || !a.rho.is_finite() {
                return Err(CmgpError::InvalidInput(format!(
                    "coregionalization A{w} variances must be positive"
                )));
            }
            if !a.is_psd() {
                return Err(CmgpError::InvalidInput(format!(
                    "coregionalization A{w} is not PSD: rho^2 = {} > {}",
                    a.rho * a.rho,
                    a.var0 * a.var1
                )));
            }
        }
        Ok(())
    }

    /// Prior variance of task `t`: `[A0 + A1]_tt`.
    pub fn prior_variance(&self, task: u8) -> f64 {
        self.coreg[0].var(task) + self.coreg[1].var(task)
    }

    pub fn noise_var(&self, task: u8) -> f64 {
        self.noise_std[task as usize].powi(2)
    }

    /// Natural-scale parameters in canonical order:
    /// `σ0, σ1, ℓ0[..], ℓ1[..], b00, b01, ρ0, b10, b11, ρ1`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.noise_std);
        v.extend_from_slice(&self.lengthscales[0]);
        v.extend_from_slice(&self.lengthscales[1]);
        for a in &self.coreg {
            v.extend_from_slice(&[a.var0, a.var1, a.rho]);
        }
        v
    }

    /// Inverse of [`to_vector`](Self::to_vector).
    pub fn from_vector(v: &[f64], d: usize) -> Result<Self> {
        if v.len() != 8 + 2 * d {
            return Err(CmgpError::InvalidInput(format!(
                "expected {} parameters for d = {d}, got {}",
                8 + 2 * d,
                v.len()
            )));
        }
        let c = 2 + 2 * d;
        Ok(Self {
            noise_std: [v[0], v[1]],
            lengthscales: [v[2..2 + d].to_vec(), v[2 + d..c].to_vec()],
            coreg: [
                Coregionalization { var0: v[c], var1: v[c + 1], rho: v[c + 2] },
                Coregionalization { var0: v[c + 3], var1: v[c + 4], rho: v[c + 5] },
            ],
        })
    }

    pub fn to_log_vector(&self) -> Vec<f64> {
        self.to_vector().into_iter().map(f64::ln).collect()
    }

    pub fn from_log_vector(v: &[f64], d: usize) -> Result<Self> {
        let nat: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        Self::from_vector(&nat, d)
    }

    /// Names in [`to_vector`](Self::to_vector) order.
    pub fn parameter_names(d: usize) -> Vec<String> {
        let mut names = vec!["sigma0".to_owned(), "sigma1".to_owned()];
        for w in 0..2 {
            names.extend((0..d).map(|k| format!("ell{w}[{k}]")));
        }
        for w in 0..2 {
            names.extend([format!("b{w}0"), format!("b{w}1"), format!("rho{w}")]);
        }
        names
    }

    /// Squared norm of the natural-scale parameter vector with each `ρ_w`
    /// counted twice (once per off-diagonal entry of `A_w`): `10 + 2d` terms.
    pub fn norm_sq(&self) -> f64 {
        let base: f64 = self.to_vector().iter().map(|v| v * v).sum();
        base + self.coreg[0].rho.powi(2) + self.coreg[1].rho.powi(2)
    }

    /// Number of terms in [`norm_sq`](Self::norm_sq).
    pub fn norm_terms(&self) -> usize {
        10 + 2 * self.d()
    }
}

/// `exp(-1/2 Σ_k (x_k - x'_k)^2 / ℓ_k^2)`.
pub fn rbf_ard(x: &[f64], x_other: &[f64], lengthscales: &[f64]) -> Result<f64> {
    if x.len() != x_other.len() || x.len() != lengthscales.len() {
        return Err(CmgpError::InvalidInput(format!(
            "dimension mismatch: {}, {}, {} length scales",
            x.len(),
            x_other.len(),
            lengthscales.len()
        )));
    }
    if let Some(l) = lengthscales.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(CmgpError::InvalidInput(format!("length scale {l} must be positive")));
    }
    Ok(rbf_unchecked(x, x_other, lengthscales))
}

#[inline]
pub(crate) fn rbf_unchecked(x: &[f64], x_other: &[f64], lengthscales: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let t = (x[k] - x_other[k]) / lengthscales[k];
        s += t * t;
    }
    (-0.5 * s).exp()
}

/// `A0 k0(x, x') + A1 k1(x, x')`.
pub fn lmc_block(x: &[f64], x_other: &[f64], theta: &CmgpHyperparams) -> Result<Matrix2<f64>> {
    let k0 = rbf_ard(x, x_other, &theta.lengthscales[0])?;
    let k1 = rbf_ard(x, x_other, &theta.lengthscales[1])?;
    Ok(theta.coreg[0].matrix() * k0 + theta.coreg[1].matrix() * k1)
}

/// Rows of `features` divided elementwise by the length scales, stored
/// column-major as `d x n` so each subject is a contiguous slice.
fn scaled_points(features: &DMatrix<f64>, lengthscales: &[f64]) -> DMatrix<f64> {
    let (n, d) = features.shape();
    DMatrix::from_fn(d, n, |k, i| features[(i, k)] / lengthscales[k])
}

/// Base kernel matrix `k(X_a, X_b)` for one length-scale vector.
pub fn base_kernel_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lengthscales: &[f64],
) -> DMatrix<f64> {
    let za = scaled_points(a, lengthscales);
    let zb = scaled_points(b, lengthscales);
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(na, nb);
    for j in 0..nb {
        let bj = zb.column(j);
        for i in 0..na {
            let ai = za.column(i);
            let mut s = 0.0;
            for k in 0..ai.len() {
                let t = ai[k] - bj[k];
                s += t * t;
            }
            out[(i, j)] = (-0.5 * s).exp();
        }
    }
    out
}

/// Symmetric base kernel matrix `k(X, X)`; diagonal is exactly 1.
pub fn base_kernel_gram(x: &DMatrix<f64>, lengthscales: &[f64]) -> DMatrix<f64> {
    let z = scaled_points(x, lengthscales);
    let n = x.nrows();
    let mut out = DMatrix::identity(n, n);
    for j in 0..n {
        let zj = z.column(j);
        for i in (j + 1)..n {
            let zi = z.column(i);
            let mut s = 0.0;
            for k in 0..zi.len() {
                let t = zi[k] - zj[k];
                s += t * t;
            }
            let v = (-0.5 * s).exp();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Task-indexed prior covariance over the training subjects.
#[derive(Debug, Clone)]
pub struct TaskIndexedGram {
    /// Entry `(i, j) = [K(X_i, X_j)]_{W_i, W_j}`.
    pub matrix: DMatrix<f64>,
    pub tasks: Vec<u8>,
    /// Diagonal jitter added when this matrix (plus noise) was factorized.
    pub jitter_used: f64,
}

/// Combines precomputed base kernels into the task-indexed gram.
pub(crate) fn assemble_gram(
    base: &[DMatrix<f64>; 2],
    row_tasks: &[u8],
    col_tasks: &[u8],
    theta: &CmgpHyperparams,
) -> DMatrix<f64> {
    let (n, m) = base[0].shape();
    DMatrix::from_fn(n, m, |i, j| {
        let (a, b) = (row_tasks[i], col_tasks[j]);
        theta.coreg[0].entry(a, b) * base[0][(i, j)] + theta.coreg[1].entry(a, b) * base[1][(i, j)]
    })
}

fn check_inputs(features: &DMatrix<f64>, tasks: &[u8], theta: &CmgpHyperparams) -> Result<()> {
    if features.ncols() != theta.d() {
        return Err(CmgpError::InvalidInput(format!(
            "features have {} columns, hyperparameters expect {}",
            features.ncols(),
            theta.d()
        )));
    }
    if features.nrows() != tasks.len() {
        return Err(CmgpError::InvalidInput("feature rows and tasks differ in length".into()));
    }
    if tasks.iter().any(|&t| t > 1) {
        return Err(CmgpError::InvalidInput("tasks must be 0 or 1".into()));
    }
    theta.validate()
}

/// Task-indexed training covariance `K_θ(X, X)` (no noise).
pub fn training_gram(
    features: &DMatrix<f64>,
    tasks: &[u8],
    theta: &CmgpHyperparams,
) -> Result<TaskIndexedGram> {
    check_inputs(features, tasks, theta)?;
    let base = [
        base_kernel_gram(features, &theta.lengthscales[0]),
        base_kernel_gram(features, &theta.lengthscales[1]),
    ];
    let matrix = assemble_gram(&base, tasks, tasks, theta);
    Ok(TaskIndexedGram { matrix, tasks: tasks.to_vec(), jitter_used: 0.0 })
}

/// `2 x n` covariance between `(f0(x), f1(x))` and the observed-task latent
/// value at each training point: column `i` is column `W_i` of
/// `lmc_block(x, X_i)`.
pub fn cross_covariance(
    x: &[f64],
    features: &DMatrix<f64>,
    tasks: &[u8],
    theta: &CmgpHyperparams,
) -> Result<DMatrix<f64>> {
    check_inputs(features, tasks, theta)?;
    if x.len() != theta.d() {
        return Err(CmgpError::InvalidInput(format!(
            "query point has {} features, expected {}",
            x.len(),
            theta.d()
        )));
    }
    let n = features.nrows();
    let mut out = DMatrix::zeros(2, n);
    let mut xi = vec![0.0; x.len()];
    for i in 0..n {
        for (k, v) in xi.iter_mut().enumerate() {
            *v = features[(i, k)];
        }
        let k0 = rbf_unchecked(x, &xi, &theta.lengthscales[0]);
        let k1 = rbf_unchecked(x, &xi, &theta.lengthscales[1]);
        for r in 0..2u8 {
            out[(r as usize, i)] =
                theta.coreg[0].entry(r, tasks[i]) * k0 + theta.coreg[1].entry(r, tasks[i]) * k1;
        }
    }
    Ok(out)
}

/// Clamps `ρ_w` to `0.99 sqrt(b_w0 b_w1)` wherever `A_w` is not PSD.
pub fn validate_or_project(theta: &CmgpHyperparams) -> CmgpHyperparams {
    let mut out = theta.clone();
    for a in out.coreg.iter_mut() {
        let bound = (a.var0 * a.var1).sqrt();
        if a.rho * a.rho > a.var0 * a.var1 {
            a.rho = 0.99 * bound * a.rho.signum();
        }
    }
    out
}

/// Row `i` of `features` as a vector.
pub(crate) fn row_vec(features: &DMatrix<f64>, i: usize) -> Vec<f64> {
    features.row(i).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn theta(d: usize) -> CmgpHyperparams {
        CmgpHyperparams {
            noise_std: [0.3, 0.4],
            lengthscales: [vec![0.7; d], (0..d).map(|k| 0.5 + 0.1 * k as f64).collect()],
            coreg: [
                Coregionalization { var0: 1.2, var1: 0.4, rho: 0.3 },
                Coregionalization { var0: 0.2, var1: 0.9, rho: 0.1 },
            ],
        }
    }

    #[test]
    fn rbf_values() {
        assert_eq!(rbf_ard(&[0.3, 2.0], &[0.3, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        // exp(-0.5) = 0.6065306597126334
        assert_relative_eq!(rbf_ard(&[1.0], &[0.0], &[1.0]).unwrap(), 0.606_530_659_712_633_4, epsilon = 1e-15);
        assert!(rbf_ard(&[1.0], &[0.0], &[0.0]).is_err());
        assert!(rbf_ard(&[1.0], &[0.0], &[-1.0]).is_err());
        let mut prev = 0.0;
        for l in [1.0, 10.0, 100.0, 1000.0] {
            let v = rbf_ard(&[1.0, -2.0], &[0.0, 3.0], &[l, l]).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(1.0 - prev < 1e-4);
    }

    #[test]
    fn lmc_block_cases() {
        let t = theta(2);
        let same = lmc_block(&[0.1, 0.2], &[0.1, 0.2], &t).unwrap();
        assert_eq!(same, t.coreg[0].matrix() + t.coreg[1].matrix());

        let t1 = CmgpHyperparams {
            noise_std: [1.0, 1.0],
            lengthscales: [vec![1.0], vec![1.0]],
            coreg: [
                Coregionalization { var0: 1.0, var1: 1.0, rho: 0.5 },
                Coregionalization { var0: 0.0, var1: 0.0, rho: 0.0 },
            ],
        };
        let b = lmc_block(&[1.0], &[0.0], &t1).unwrap();
        let e = (-0.5f64).exp();
        assert_relative_eq!(b[(0, 0)], 0.6065, epsilon = 5e-5);
        assert_relative_eq!(b[(0, 1)], 0.3033, epsilon = 5e-5);
        assert_eq!(b, t1.coreg[0].matrix() * e);
    }

    #[test]
    fn gram_small_cases() {
        let t = theta(1);
        let x = DMatrix::from_element(1, 1, 0.4);
        let g = training_gram(&x, &[0], &t).unwrap();
        assert_eq!(g.matrix[(0, 0)], 1.2 + 0.2);

        let x2 = DMatrix::from_element(2, 1, 0.4);
        let g2 = training_gram(&x2, &[0, 1], &t).unwrap();
        assert_relative_eq!(g2.matrix[(0, 1)], 0.3 + 0.1, epsilon = 1e-15);
    }

    #[test]
    fn gram_matches_brute_force_loop() {
        let x = crate::dataset::make_synthetic_covariates(6, 3, 17).unwrap();
        let w = [0u8, 1, 1, 0, 1, 0];
        let t = theta(3);
        let g = training_gram(&x, &w, &t).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let b = lmc_block(&row_vec(&x, i), &row_vec(&x, j), &t).unwrap();
                assert_relative_eq!(g.matrix[(i, j)], b[(w[i] as usize, w[j] as usize)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cross_covariance_cases() {
        let t = theta(1);
        let x = DMatrix::from_element(1, 1, 0.25);
        let c = cross_covariance(&[0.25], &x, &[0], &t).unwrap();
        assert_relative_eq!(c[(0, 0)], 1.2 + 0.2, epsilon = 1e-15);
        assert_relative_eq!(c[(1, 0)], 0.3 + 0.1, epsilon = 1e-15);

        let mut dec = t.clone();
        dec.coreg[0].rho = 0.0;
        dec.coreg[1].rho = 0.0;
        let far = cross_covariance(&[100.0], &x, &[0], &dec).unwrap();
        assert!(far.iter().all(|v| v.abs() < 1e-100));
    }

    #[test]
    fn cross_covariance_reproduces_gram_rows() {
        let x = crate::dataset::make_synthetic_covariates(7, 2, 5).unwrap();
        let w = [1u8, 0, 0, 1, 1, 0, 1];
        let t = theta(2);
        let g = training_gram(&x, &w, &t).unwrap();
        for i in 0..7 {
            let c = cross_covariance(&row_vec(&x, i), &x, &w, &t).unwrap();
            for j in 0..7 {
                assert_relative_eq!(c[(w[i] as usize, j)], g.matrix[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn projection() {
        let t = theta(1);
        assert_eq!(validate_or_project(&t), t);
        let mut bad = t.clone();
        bad.coreg[0] = Coregionalization { var0: 1.0, var1: 1.0, rho: 2.0 };
        let p = validate_or_project(&bad);
        assert_relative_eq!(p.coreg[0].rho, 0.99, epsilon = 1e-15);
        // min eigenvalue of [[a, r], [r, b]] = (a+b)/2 - sqrt(((a-b)/2)^2 + r^2)
        let a = p.coreg[0];
        let min_eig = (a.var0 + a.var1) / 2.0 - (((a.var0 - a.var1) / 2.0).powi(2) + a.rho.powi(2)).sqrt();
        assert!(min_eig >= 0.0);
        p.validate().unwrap();
    }

    #[test]
    fn json_layout() {
        let t = theta(2);
        let s = serde_json::to_value(&t).unwrap();
        let keys: Vec<&str> = s.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in ["sigma0", "sigma1", "ell0", "ell1", "b00", "b01", "rho0", "b10", "b11", "rho1"] {
            assert!(keys.contains(&k), "{k}");
        }
        let back: CmgpHyperparams = serde_json::from_value(s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<CmgpHyperparams>(r#"{"sigma0":1}"#).is_err());
    }

    #[test]
    fn vector_layout_and_norm() {
        let t = theta(3);
        let v = t.to_vector();
        assert_eq!(v.len(), t.n_params());
        assert_eq!(CmgpHyperparams::from_vector(&v, 3).unwrap(), t);
        assert_eq!(CmgpHyperparams::parameter_names(3).len(), v.len());
        let expect: f64 = v.iter().map(|x| x * x).sum::<f64>() + 0.3f64.powi(2) + 0.1f64.powi(2);
        assert_relative_eq!(t.norm_sq(), expect, epsilon = 1e-14);
        assert_eq!(t.norm_terms(), 16);
    }

    proptest! {
        #[test]
        fn block_symmetry_and_unit_diagonal(
            x in prop::collection::vec(-3.0f64..3.0, 3),
            y in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let t = theta(3);
            let a = lmc_block(&x, &y, &t).unwrap();
            let b = lmc_block(&y, &x, &t).unwrap();
            prop_assert!((a - b.transpose()).amax() < 1e-15);
            prop_assert!((a - a.transpose()).amax() < 1e-15);
            let d = lmc_block(&x, &x, &t).unwrap();
            prop_assert!((d[(0, 0)] - t.prior_variance(0)).abs() < 1e-15);
            prop_assert!((d[(1, 1)] - t.prior_variance(1)).abs() < 1e-15);
        }

        #[test]
        fn gram_plus_noise_factorizes(seed in any::<u64>(), n in 1usize..20) {
            let x = crate::dataset::make_synthetic_covariates(n, 2, seed).unwrap();
            let w: Vec<u8> = (0..n).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
            let t = theta(2);
            let mut g = training_gram(&x, &w, &t).unwrap().matrix;
            for i in 0..n {
                g[(i, i)] += t.noise_var(w[i]);
            }
            prop_assert!(crate::linalg::cholesky_with_jitter(&g).is_ok());
        }
    }
}
