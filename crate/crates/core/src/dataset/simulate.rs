use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{GeneratorParams, SyntheticGroundTruth};
use crate::error::{CmgpError, Result};
use crate::rng;

/// Support of the per-feature coefficient distribution.
pub const OMEGA_LEVELS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

/// Both noisy potential outcomes for every subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

impl PotentialOutcomes {
    /// Picks `y1` for treated and `y0` for control subjects.
    pub fn factual(&self, treatments: &[u8]) -> Vec<f64> {
        treatments
            .iter()
            .enumerate()
            .map(|(i, &w)| if w == 1 { self.y1[i] } else { self.y0[i] })
            .collect()
    }

    pub fn counterfactual(&self, treatments: &[u8]) -> Vec<f64> {
        treatments
            .iter()
            .enumerate()
            .map(|(i, &w)| if w == 1 { self.y0[i] } else { self.y1[i] })
            .collect()
    }
}

/// I.i.d. Uniform[0,1] covariates.
pub fn make_synthetic_covariates(n: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 || d == 0 {
        return Err(CmgpError::InvalidInput(format!("need n, d >= 1, got {n}x{d}")));
    }
    let mut rng = rng::seeded(seed);
    Ok(DMatrix::from_fn(n, d, |_, _| rng.random::<f64>()))
}

/// Draws each coefficient uniformly from `OMEGA_LEVELS`.
pub fn sample_omega(d: usize, rng: &mut rng::Rng) -> Vec<f64> {
    (0..d).map(|_| OMEGA_LEVELS[rng.random_range(0..OMEGA_LEVELS.len())]).collect()
}

/// Noise-free surfaces for a given coefficient vector:
/// `f0(x) = exp((x + 1/2)'Ω)` and `f1(x) = Ω'x - ω`, with `ω` chosen so that
/// the cohort mean of `f1 - f0` equals `target_mean_benefit`.
pub fn unos_surfaces(
    features: &DMatrix<f64>,
    omega_vec: &[f64],
    target_mean_benefit: f64,
) -> Result<SyntheticGroundTruth> {
    let (n, d) = features.shape();
    if d == 0 || n == 0 {
        return Err(CmgpError::InvalidInput("features must be non-empty".into()));
    }
    if omega_vec.len() != d {
        return Err(CmgpError::InvalidInput(format!(
            "{} coefficients for {d} features",
            omega_vec.len()
        )));
    }
    let mut f0 = Vec::with_capacity(n);
    let mut linear = Vec::with_capacity(n);
    for i in 0..n {
        let row = features.row(i);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CmgpError::NonFinite { subject: i, message: "feature".into() });
        }
        let lin: f64 = row.iter().zip(omega_vec).map(|(x, o)| x * o).sum();
        let expo: f64 = row.iter().zip(omega_vec).map(|(x, o)| (x + 0.5) * o).sum();
        let base = expo.exp();
        if !base.is_finite() {
            return Err(CmgpError::NonFinite {
                subject: i,
                message: format!("exp({expo}) overflows in the control surface"),
            });
        }
        f0.push(base);
        linear.push(lin);
    }
    let mean_gap = linear.iter().zip(&f0).map(|(l, b)| l - b).sum::<f64>() / n as f64;
    let omega_offset = mean_gap - target_mean_benefit;
    let f1: Vec<f64> = linear.iter().map(|l| l - omega_offset).collect();

    // Recentre so the empirical mean hits the target to rounding error; the
    // closed-form offset alone can be off by a few ulps of the surface scale.
    let mut truth = SyntheticGroundTruth::from_surfaces(f0, f1)?;
    let drift = truth.true_ite.iter().sum::<f64>() / n as f64 - target_mean_benefit;
    if drift != 0.0 {
        for v in truth.f1.iter_mut() {
            *v -= drift;
        }
        truth = SyntheticGroundTruth::from_surfaces(truth.f0, truth.f1)?;
    }
    let omega_offset = omega_offset + drift;
    truth.generator = Some(GeneratorParams { omega_vec: omega_vec.to_vec(), omega_offset });
    Ok(truth)
}

/// Samples coefficients, evaluates the surfaces and adds Gaussian noise with
/// standard deviations `noise_std = (σ0, σ1)`.
pub fn simulate_unos_outcomes(
    features: &DMatrix<f64>,
    target_mean_benefit: f64,
    noise_std: (f64, f64),
    seed: u64,
) -> Result<(PotentialOutcomes, SyntheticGroundTruth)> {
    if !(noise_std.0 >= 0.0 && noise_std.1 >= 0.0) {
        return Err(CmgpError::InvalidInput(format!("noise std must be >= 0, got {noise_std:?}")));
    }
    let mut rng = rng::seeded(seed);
    let omega = sample_omega(features.ncols(), &mut rng);
    let mut truth = unos_surfaces(features, &omega, target_mean_benefit)?;
    truth.noise_std = Some(noise_std);

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = truth.len();
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for i in 0..n {
        y0.push(truth.f0[i] + noise_std.0 * std_normal.sample(&mut rng));
        y1.push(truth.f1[i] + noise_std.1 * std_normal.sample(&mut rng));
    }
    Ok((PotentialOutcomes { y0, y1 }, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_coefficients_give_constant_surfaces() {
        let x = make_synthetic_covariates(5, 3, 1).unwrap();
        let t = unos_surfaces(&x, &[0.0; 3], 5.0).unwrap();
        for i in 0..5 {
            assert_eq!(t.f0[i], 1.0);
            assert_relative_eq!(t.true_ite[i], 5.0, epsilon = 1e-14);
        }
        assert_relative_eq!(t.generator.unwrap().omega_offset, -6.0, epsilon = 1e-14);
    }

    #[test]
    fn single_feature_control_surface() {
        let x = DMatrix::from_element(1, 1, 0.5);
        let t = unos_surfaces(&x, &[0.4], 5.0).unwrap();
        // exp(0.4) to 15 significant digits
        assert_relative_eq!(t.f0[0], 1.491_824_697_641_27, epsilon = 1e-14);
    }

    #[test]
    fn mean_benefit_hits_target() {
        let x = make_synthetic_covariates(1006, 14, 3).unwrap();
        let (po, t) = simulate_unos_outcomes(&x, 5.0, (1.0, 1.0), 11).unwrap();
        let mean = t.true_ite.iter().sum::<f64>() / 1006.0;
        assert!((mean - 5.0).abs() <= 1e-10, "{mean}");
        assert_eq!(po.y0.len(), 1006);
        for o in t.generator.unwrap().omega_vec {
            assert!(OMEGA_LEVELS.contains(&o));
        }
    }

    #[test]
    fn overflow_is_reported_per_subject() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 4000.0]);
        let err = unos_surfaces(&x, &[0.4], 5.0).unwrap_err();
        assert!(matches!(err, CmgpError::NonFinite { subject: 1, .. }));
    }

    #[test]
    fn covariates_are_deterministic_and_unit_interval() {
        let a = make_synthetic_covariates(200, 50, 9).unwrap();
        let b = make_synthetic_covariates(200, 50, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        // 10^4 entries: mean within 3/sqrt(nd) of 1/2
        let mean = a.mean();
        assert!((mean - 0.5).abs() <= 3.0 / (10_000f64).sqrt(), "{mean}");
    }

    #[test]
    fn factual_and_counterfactual_pick_opposite_arms() {
        let po = PotentialOutcomes { y0: vec![1.0, 2.0], y1: vec![10.0, 20.0] };
        assert_eq!(po.factual(&[0, 1]), vec![1.0, 20.0]);
        assert_eq!(po.counterfactual(&[0, 1]), vec![10.0, 2.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn mean_ite_is_exact_for_any_seed(seed in any::<u64>(), d in 1usize..=20, n in 1usize..300) {
            let x = make_synthetic_covariates(n, d, seed).unwrap();
            let (_, t) = simulate_unos_outcomes(&x, 5.0, (1.0, 1.0), seed ^ 0xabc).unwrap();
            let mean = t.true_ite.iter().sum::<f64>() / n as f64;
            prop_assert!((mean - 5.0).abs() <= 1e-10);
            for i in 0..n {
                prop_assert_eq!(t.true_ite[i], t.f1[i] - t.f0[i]);
            }
        }
    }
}
