//! Observational datasets: representation, CSV persistence, the semi-synthetic
//! survival-benefit generator, selection-bias injection, and stratified splits.

mod csv_io;
mod selection;
mod simulate;
mod split;

use nalgebra::{DMatrix, DVector};

use crate::error::{CmgpError, Result};

pub use csv_io::{load_csv, save_csv, write_csv, LoadedDataset};
pub use selection::{
    assign_treatments, biased_subsample, biased_subsample_with, fit_propensity, PropensityFit,
    Subsample,
};
pub use simulate::{
    make_synthetic_covariates, sample_omega, simulate_unos_outcomes, unos_surfaces,
    PotentialOutcomes, OMEGA_LEVELS,
};
pub use split::{split, split_indices, SplitIndices, SplitPart, SplitSpec};

/// Features, binary treatment assignments and factual outcomes for `n` subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalDataset {
    features: DMatrix<f64>,
    treatments: Vec<u8>,
    outcomes: Vec<f64>,
    feature_names: Option<Vec<String>>,
}

impl ObservationalDataset {
    pub fn new(features: DMatrix<f64>, treatments: Vec<u8>, outcomes: Vec<f64>) -> Result<Self> {
        Self::with_names(features, treatments, outcomes, None)
    }

    pub fn with_names(
        features: DMatrix<f64>,
        treatments: Vec<u8>,
        outcomes: Vec<f64>,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, d) = features.shape();
        if n == 0 || d == 0 {
            return Err(CmgpError::InvalidInput(format!(
                "dataset must have n >= 1 and d >= 1, got {n}x{d}"
            )));
        }
        if treatments.len() != n || outcomes.len() != n {
            return Err(CmgpError::InvalidInput(format!(
                "length mismatch: {n} feature rows, {} treatments, {} outcomes",
                treatments.len(),
                outcomes.len()
            )));
        }
        if let Some(names) = &feature_names {
            if names.len() != d {
                return Err(CmgpError::InvalidInput(format!(
                    "{} feature names for {d} features",
                    names.len()
                )));
            }
        }
        for i in 0..n {
            if treatments[i] > 1 {
                return Err(CmgpError::InvalidInput(format!(
                    "subject {i}: treatment {} is not 0 or 1",
                    treatments[i]
                )));
            }
            if !outcomes[i].is_finite() {
                return Err(CmgpError::NonFinite { subject: i, message: "outcome".into() });
            }
            if features.row(i).iter().any(|v| !v.is_finite()) {
                return Err(CmgpError::NonFinite { subject: i, message: "feature".into() });
            }
        }
        Ok(Self { features, treatments, outcomes, feature_names })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    /// Column header for feature `k`: the stored name or `x{k+1}`.
    pub fn feature_name(&self, k: usize) -> String {
        match &self.feature_names {
            Some(names) => names[k].clone(),
            None => format!("x{}", k + 1),
        }
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    /// `(controls, treated)`.
    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.treatments.iter().filter(|&&w| w == 1).count();
        (self.n() - treated, treated)
    }

    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treatments[i] == arm).collect()
    }

    /// Errors unless both treatment groups are present.
    pub fn ensure_both_arms(&self) -> Result<()> {
        let (controls, treated) = self.arm_counts();
        if controls == 0 {
            return Err(CmgpError::EmptyArm { arm: 0 });
        }
        if treated == 0 {
            return Err(CmgpError::EmptyArm { arm: 1 });
        }
        Ok(())
    }

    /// Sub-dataset with the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let features = self.features.select_rows(indices.iter());
        Self {
            features,
            treatments: indices.iter().map(|&i| self.treatments[i]).collect(),
            outcomes: indices.iter().map(|&i| self.outcomes[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Same subjects with a different outcome vector.
    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        Self::with_names(
            self.features.clone(),
            self.treatments.clone(),
            outcomes,
            self.feature_names.clone(),
        )
    }
}

/// Generator parameters of the survival-benefit simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// Regression coefficients, one per feature, each in `OMEGA_LEVELS`.
    pub omega_vec: Vec<f64>,
    /// Offset subtracted from the treated surface.
    pub omega_offset: f64,
}

/// True response surfaces evaluated at each subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGroundTruth {
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
    pub true_ite: Vec<f64>,
    pub generator: Option<GeneratorParams>,
    pub noise_std: Option<(f64, f64)>,
}

impl SyntheticGroundTruth {
    /// Builds a truth record from the two surfaces; `true_ite = f1 - f0`.
    pub fn from_surfaces(f0: Vec<f64>, f1: Vec<f64>) -> Result<Self> {
        if f0.len() != f1.len() {
            return Err(CmgpError::InvalidInput(format!(
                "surface length mismatch: {} vs {}",
                f0.len(),
                f1.len()
            )));
        }
        let true_ite = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
        Ok(Self { f0, f1, true_ite, generator: None, noise_std: None })
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            f0: pick(&self.f0),
            f1: pick(&self.f1),
            true_ite: pick(&self.true_ite),
            generator: self.generator.clone(),
            noise_std: self.noise_std,
        }
    }
}
