//! Treatment assignment and selection-bias injection.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::ObservationalDataset;
use crate::error::{CmgpError, Result};
use crate::rng;

const RIDGE: f64 = 1e-6;
const MAX_IRLS_ITERS: usize = 100;
const IRLS_TOL: f64 = 1e-10;

/// Logistic-regression propensity model fitted on standardized features.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// Intercept followed by one coefficient per standardized feature.
    pub coefficients: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Fitted `P(W = 1 | X_i)` for every row of the training data.
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn standardize(features: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let (n, d) = features.shape();
    let mut design = DMatrix::from_element(n, d + 1, 1.0);
    let mut means = Vec::with_capacity(d);
    let mut scales = Vec::with_capacity(d);
    for k in 0..d {
        let col = features.column(k);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            design[(i, k + 1)] = (col[i] - mean) / scale;
        }
        means.push(mean);
        scales.push(scale);
    }
    (design, means, scales)
}

/// Maximum-likelihood logistic regression via IRLS with a small L2 penalty on
/// the slopes (the intercept is unpenalized).
///
/// Perfect separation makes the slopes diverge; the loop then stops at the
/// iteration cap or the first non-finite update, keeps the last finite
/// coefficients, and records a warning.
pub fn fit_propensity(features: &DMatrix<f64>, treatments: &[u8]) -> Result<PropensityFit> {
    let (n, d) = features.shape();
    if treatments.len() != n || n == 0 {
        return Err(CmgpError::InvalidInput("propensity inputs misaligned or empty".into()));
    }
    let (design, means, scales) = standardize(features);
    let target = DVector::from_iterator(n, treatments.iter().map(|&w| w as f64));
    let p = d + 1;
    let mut beta = DVector::zeros(p);
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..MAX_IRLS_ITERS {
        iterations = it + 1;
        let eta = &design * &beta;
        let mu = eta.map(sigmoid);
        let weights = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        // Newton step: (X'WX + λI) δ = X'(y - μ) - λβ
        let mut weighted = design.clone();
        for i in 0..n {
            let w = weights[i];
            weighted.row_mut(i).scale_mut(w);
        }
        let mut hessian = design.transpose() * &weighted;
        let mut score = design.transpose() * (&target - &mu);
        for k in 1..p {
            hessian[(k, k)] += RIDGE;
            score[k] -= RIDGE * beta[k];
        }
        let step = match hessian.cholesky() {
            Some(ch) => ch.solve(&score),
            None => {
                warnings.push(format!("IRLS iteration {iterations}: singular Hessian"));
                break;
            }
        };
        let next = &beta + &step;
        if next.iter().any(|v| !v.is_finite()) {
            warnings.push(format!("IRLS iteration {iterations}: non-finite update"));
            break;
        }
        beta = next;
        if step.amax() < IRLS_TOL * (1.0 + beta.amax()) {
            converged = true;
            break;
        }
    }
    if !converged {
        let msg = format!(
            "logistic fit did not converge after {iterations} iterations (possible perfect separation); using last coefficients"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let scores = (&design * &beta).map(sigmoid).iter().copied().collect();
    Ok(PropensityFit {
        coefficients: beta.iter().copied().collect(),
        means,
        scales,
        scores,
        iterations,
        converged,
        warnings,
    })
}

/// Selection-biased treatment assignment for synthetic cohorts.
///
/// Each subject gets a latent score `strength * v'z_i + L_i`, where `z_i` are
/// the standardized features, `v` is a random unit direction and `L_i` is
/// standard logistic noise; the `n_treated` highest scores are treated.
pub fn assign_treatments(
    features: &DMatrix<f64>,
    n_treated: usize,
    strength: f64,
    seed: u64,
) -> Result<Vec<u8>> {
    let (n, d) = features.shape();
    if n_treated == 0 || n_treated >= n {
        return Err(CmgpError::InvalidInput(format!(
            "n_treated must be in 1..{n}, got {n_treated}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut direction: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    direction.iter_mut().for_each(|v| *v /= norm);

    let (design, _, _) = standardize(features);
    let mut scores: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let lin: f64 = (0..d).map(|k| design[(i, k + 1)] * direction[k]).sum();
            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            (strength * lin + (u / (1.0 - u)).ln(), i)
        })
        .collect();
    scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut treatments = vec![0u8; n];
    for &(_, i) in scores.iter().take(n_treated) {
        treatments[i] = 1;
    }
    Ok(treatments)
}

/// Result of biased control removal.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub dataset: ObservationalDataset,
    /// Original indices of the retained rows, ascending.
    pub kept: Vec<usize>,
    /// Original indices of removed rows, in removal order.
    pub removed: Vec<usize>,
    pub propensity: PropensityFit,
    pub warnings: Vec<String>,
}

/// Removes `n_remove` controls: each step takes the remaining control with the
/// highest fitted propensity with probability 1/2, else a uniformly random one.
pub fn biased_subsample(
    dataset: &ObservationalDataset,
    n_remove: usize,
    seed: u64,
) -> Result<Subsample> {
    biased_subsample_with(dataset, n_remove, 0.5, seed)
}

/// Same as [`biased_subsample`] with a configurable probability of the
/// greedy (highest-propensity) branch. Propensities are fitted once.
pub fn biased_subsample_with(
    dataset: &ObservationalDataset,
    n_remove: usize,
    greedy_probability: f64,
    seed: u64,
) -> Result<Subsample> {
    if !(0.0..=1.0).contains(&greedy_probability) {
        return Err(CmgpError::InvalidInput(format!(
            "greedy probability {greedy_probability} outside [0, 1]"
        )));
    }
    let mut controls = dataset.arm_indices(0);
    if controls.len() <= n_remove {
        return Err(CmgpError::InvalidInput(format!(
            "cannot remove {n_remove} of {} controls",
            controls.len()
        )));
    }
    let propensity = fit_propensity(dataset.features(), dataset.treatments())?;
    let scores = &propensity.scores;
    let mut rng = rng::seeded(seed);
    let mut removed = Vec::with_capacity(n_remove);
    for _ in 0..n_remove {
        let greedy = rng.random::<f64>() < greedy_probability;
        let pos = if greedy {
            // highest score, lowest index on ties (controls stay sorted)
            let mut best = 0;
            for (p, &i) in controls.iter().enumerate() {
                if scores[i] > scores[controls[best]] {
                    best = p;
                }
            }
            best
        } else {
            rng.random_range(0..controls.len())
        };
        removed.push(controls.remove(pos));
    }
    let mut drop = vec![false; dataset.n()];
    for &i in &removed {
        drop[i] = true;
    }
    let kept: Vec<usize> = (0..dataset.n()).filter(|&i| !drop[i]).collect();
    let warnings = propensity.warnings.clone();
    Ok(Subsample { dataset: dataset.select(&kept), kept, removed, propensity, warnings })
}
