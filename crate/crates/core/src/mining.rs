//! Positive/negative pair construction from a batch distance matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distances::DistanceMatrix;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningMode {
    /// Only `(i, i)` pairs are positive.
    IdentityOnly,
    /// `d_ij < tau` with a fixed `tau`.
    Fixed,
    /// `tau` is the batch mean of the self-distances.
    Adaptive,
}

impl MiningMode {
    pub fn name(self) -> &'static str {
        match self {
            MiningMode::IdentityOnly => "identity-only",
            MiningMode::Fixed => "fixed",
            MiningMode::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for MiningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MiningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity-only" | "identity" => Ok(MiningMode::IdentityOnly),
            "fixed" => Ok(MiningMode::Fixed),
            "adaptive" => Ok(MiningMode::Adaptive),
            other => Err(Error::InvalidConfig(format!("unknown mining mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLabels {
    pub batch_size: usize,
    /// Row-major symmetric membership matrix; the diagonal is always set.
    positive: Vec<bool>,
    pub tau: f64,
    pub mode: MiningMode,
}

impl PairLabels {
    pub fn identity(batch_size: usize) -> Self {
        let mut positive = vec![false; batch_size * batch_size];
        for i in 0..batch_size {
            positive[i * batch_size + i] = true;
        }
        Self {
            batch_size,
            positive,
            tau: 0.0,
            mode: MiningMode::IdentityOnly,
        }
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positive[i * self.batch_size + j]
    }

    /// Unordered positive pairs `(i, j)` with `i <= j`, self-pairs included.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        let b = self.batch_size;
        (0..b)
            .flat_map(|i| (i..b).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_positive(i, j))
            .collect()
    }

    /// Number of positive pairs with `i < j`.
    pub fn mined_count(&self) -> usize {
        self.positive_pairs().iter().filter(|(i, j)| i != j).count()
    }
}

pub fn mine_pairs(dists: &DistanceMatrix, mode: MiningMode, tau_fixed: f64) -> Result<PairLabels> {
    let b = dists.size;
    for i in 0..b {
        for j in (i + 1)..b {
            let (a, c) = (dists.get(i, j), dists.get(j, i));
            if (a - c).abs() > SYMMETRY_TOL {
                return Err(Error::Asymmetric { i, j, a, b: c });
            }
        }
    }
    let tau = match mode {
        MiningMode::IdentityOnly => return Ok(PairLabels::identity(b)),
        MiningMode::Fixed => tau_fixed,
        MiningMode::Adaptive => {
            if b == 0 {
                0.0
            } else {
                dists.diagonal().iter().sum::<f64>() / b as f64
            }
        }
    };
    let mut labels = PairLabels::identity(b);
    labels.tau = tau;
    labels.mode = mode;
    for i in 0..b {
        for j in (i + 1)..b {
            if dists.get(i, j) < tau {
                labels.positive[i * b + j] = true;
                labels.positive[j * b + i] = true;
            }
        }
    }
    Ok(labels)
}

/// Precision and recall of mined non-self pairs against class labels.
/// Precision is 1 when nothing is mined; recall is 1 when there are no
/// same-class pairs.
pub fn mining_precision_recall(labels: &PairLabels, truth: &[i64]) -> Result<(f64, f64)> {
    let c = mining_counts(labels, truth)?;
    Ok(c.precision_recall())
}

/// Raw counts behind [`mining_precision_recall`], summable across batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MiningCounts {
    pub mined: usize,
    pub true_positive: usize,
    pub same_class: usize,
}

impl MiningCounts {
    pub fn add(&mut self, other: MiningCounts) {
        self.mined += other.mined;
        self.true_positive += other.true_positive;
        self.same_class += other.same_class;
    }

    pub fn precision_recall(&self) -> (f64, f64) {
        let precision = if self.mined == 0 {
            1.0
        } else {
            self.true_positive as f64 / self.mined as f64
        };
        let recall = if self.same_class == 0 {
            1.0
        } else {
            self.true_positive as f64 / self.same_class as f64
        };
        (precision, recall)
    }
}

pub fn mining_counts(labels: &PairLabels, truth: &[i64]) -> Result<MiningCounts> {
    let b = labels.batch_size;
    if truth.len() != b {
        return Err(Error::DimensionMismatch {
            what: "class labels",
            expected: b,
            got: truth.len(),
        });
    }
    let mut c = MiningCounts::default();
    for i in 0..b {
        for j in (i + 1)..b {
            let same = truth[i] == truth[j];
            let mined = labels.is_positive(i, j);
            c.mined += mined as usize;
            c.same_class += same as usize;
            c.true_positive += (mined && same) as usize;
        }
    }
    Ok(c)
}
