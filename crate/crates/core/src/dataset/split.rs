use rand::seq::SliceRandom;

use super::{ObservationalDataset, SyntheticGroundTruth};
use crate::error::{CmgpError, Result};
use crate::rng;

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, valid_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let spec = Self { train_frac, valid_frac, test_frac, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// The 60/20/20 protocol.
    pub fn standard(seed: u64) -> Self {
        Self { train_frac: 0.6, valid_frac: 0.2, test_frac: 0.2, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.valid_frac, self.test_frac];
        if fr.iter().any(|f| !(*f > 0.0)) {
            return Err(CmgpError::InvalidInput(format!("split fractions must be > 0: {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(CmgpError::InvalidInput(format!("split fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }

    /// Part sizes for `n` subjects by largest remainder; when `n >= 3` every
    /// part receives at least one subject.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let fr = [self.train_frac, self.valid_frac, self.test_frac];
        let mut sizes = apportion(n, &fr);
        if n >= 3 {
            for part in 0..3 {
                if sizes[part] == 0 {
                    let donor = (0..3).max_by_key(|&p| (sizes[p], usize::MAX - p)).unwrap();
                    sizes[donor] -= 1;
                    sizes[part] += 1;
                }
            }
        }
        sizes
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier part.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for p in 0..3 {
        sizes[p] = exact[p].floor() as usize;
    }
    let mut left = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &p in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[p] += 1;
        left -= 1;
    }
    sizes
}

/// Which part a subject falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Valid,
    Test,
}

/// Row indices of each part, ascending within a part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified assignment of rows to the three parts.
///
/// Global part sizes come from largest remainder; each arm's share of a part
/// is its proportional allocation, so per-arm proportions match up to one
/// subject.
pub fn split_indices(treatments: &[u8], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = treatments.len();
    let sizes = spec.sizes(n);
    let mut arms: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &w) in treatments.iter().enumerate() {
        arms[w as usize].push(i);
    }
    let mut rng = rng::seeded(spec.seed);
    for arm in arms.iter_mut() {
        arm.shuffle(&mut rng);
    }

    // control allocation per part, rounded, then repaired to stay feasible
    let n0 = arms[0].len();
    let n1 = arms[1].len();
    let mut alloc0 = [0usize; 3];
    for p in 0..2 {
        alloc0[p] = ((sizes[p] as f64) * n0 as f64 / n.max(1) as f64).round() as usize;
        alloc0[p] = alloc0[p].min(sizes[p]);
    }
    while alloc0[0] + alloc0[1] > n0 {
        let p = if alloc0[1] > 0 { 1 } else { 0 };
        alloc0[p] -= 1;
    }
    alloc0[2] = n0 - alloc0[0] - alloc0[1];
    // the treated arm takes the remainder of each part; shift controls until
    // that remainder is non-negative everywhere
    loop {
        let over = (0..3).find(|&p| alloc0[p] > sizes[p]);
        match over {
            Some(p) => {
                let q = (0..3).find(|&q| alloc0[q] < sizes[q]).expect("sizes sum to n");
                alloc0[p] -= 1;
                alloc0[q] += 1;
            }
            None => break,
        }
    }
    let alloc1: Vec<usize> = (0..3).map(|p| sizes[p] - alloc0[p]).collect();
    debug_assert_eq!(alloc1.iter().sum::<usize>(), n1);

    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (arm, alloc) in [(&arms[0], alloc0.to_vec()), (&arms[1], alloc1)] {
        let mut start = 0;
        for p in 0..3 {
            parts[p].extend_from_slice(&arm[start..start + alloc[p]]);
            start += alloc[p];
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }
    let [train, valid, test] = parts;
    if !train.iter().any(|&i| treatments[i] == 0) {
        return Err(CmgpError::EmptyArm { arm: 0 });
    }
    if !train.iter().any(|&i| treatments[i] == 1) {
        return Err(CmgpError::EmptyArm { arm: 1 });
    }
    Ok(SplitIndices { train, valid, test })
}

/// Splits a dataset and its optional truth into `(train, valid, test)`.
#[allow(clippy::type_complexity)]
pub fn split(
    dataset: &ObservationalDataset,
    truth: Option<&SyntheticGroundTruth>,
    spec: &SplitSpec,
) -> Result<[(ObservationalDataset, Option<SyntheticGroundTruth>); 3]> {
    let idx = split_indices(dataset.treatments(), spec)?;
    let make = |rows: &[usize]| (dataset.select(rows), truth.map(|t| t.select(rows)));
    Ok([make(&idx.train), make(&idx.valid), make(&idx.test)])
}

impl SplitIndices {
    pub fn part_of(&self, i: usize) -> Option<SplitPart> {
        if self.train.binary_search(&i).is_ok() {
            Some(SplitPart::Train)
        } else if self.valid.binary_search(&i).is_ok() {
            Some(SplitPart::Valid)
        } else if self.test.binary_search(&i).is_ok() {
            Some(SplitPart::Test)
        } else {
            None
        }
    }
}
