//! Sample-level and distribution-level distances between videos.
//!
//! None of these are differentiated: they only feed pair mining and
//! evaluation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{SampleSet, VideoDistribution};
use crate::error::{Error, Result};
use crate::numerics::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// Monte-Carlo Bhattacharyya over sample pairs.
    Bhattacharyya,
    /// Monte-Carlo squared Euclidean over sample pairs.
    Euclidean,
    /// Symmetrized KL between the moment-level Gaussians.
    Js,
    /// Squared 2-Wasserstein between the moment-level Gaussians.
    Wasserstein,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 4] = [
        DistanceKind::Bhattacharyya,
        DistanceKind::Euclidean,
        DistanceKind::Js,
        DistanceKind::Wasserstein,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::Bhattacharyya => "bhattacharyya",
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::Js => "js",
            DistanceKind::Wasserstein => "wasserstein",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bhattacharyya" | "bd" => Ok(DistanceKind::Bhattacharyya),
            "euclidean" | "ed" => Ok(DistanceKind::Euclidean),
            "js" | "jensen-shannon" => Ok(DistanceKind::Js),
            "wasserstein" | "wd" | "w2" => Ok(DistanceKind::Wasserstein),
            other => Err(Error::InvalidConfig(format!(
                "unknown distance metric '{other}' (expected bhattacharyya, euclidean, js or wasserstein)"
            ))),
        }
    }
}

/// A distance together with the scale `lambda` used by the Bhattacharyya
/// quadratic term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceMetric {
    pub kind: DistanceKind,
    pub lambda: f64,
}

impl DistanceMetric {
    pub fn new(kind: DistanceKind, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { kind, lambda })
    }

    /// `lambda = 1 / (4 D)`.
    pub fn for_dim(kind: DistanceKind, embed_dim: usize) -> Self {
        Self {
            kind,
            lambda: 1.0 / (4.0 * embed_dim as f64),
        }
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// Log term of the Bhattacharyya distance, summed over dimensions.
fn bhatta_log_term(var_i: &[f64], var_j: &[f64]) -> f64 {
    var_i
        .iter()
        .zip(var_j)
        .map(|(a, b)| (0.25 * (a / b + b / a + 2.0)).ln())
        .sum()
}

/// Bhattacharyya distance between two draws, using their videos' mixture
/// variances.
pub fn bhatta_sample(
    z_i: &[f64],
    z_j: &[f64],
    var_i: &[f64],
    var_j: &[f64],
    lambda: f64,
) -> Result<f64> {
    let d = z_i.len();
    check_len("bhattacharyya z_j", d, z_j.len())?;
    check_len("bhattacharyya var_i", d, var_i.len())?;
    check_len("bhattacharyya var_j", d, var_j.len())?;
    let quad: f64 = (0..d)
        .map(|k| (z_i[k] - z_j[k]).powi(2) / (var_i[k] + var_j[k]))
        .sum();
    Ok(0.25 * (bhatta_log_term(var_i, var_j) + lambda * quad))
}

fn check_k(s_i: &SampleSet, s_j: &SampleSet) -> Result<()> {
    if s_i.k() != s_j.k() {
        return Err(Error::DimensionMismatch {
            what: "sample count K",
            expected: s_i.k(),
            got: s_j.k(),
        });
    }
    if s_i.k() == 0 {
        return Err(Error::Empty("sample set"));
    }
    Ok(())
}

/// Mean over all `K x K` draw pairs of the sample-level Bhattacharyya
/// distance.
fn bhatta_mc(
    s_i: &SampleSet,
    s_j: &SampleSet,
    var_i: &[f64],
    var_j: &[f64],
    lambda: f64,
) -> f64 {
    let log_term = bhatta_log_term(var_i, var_j);
    let inv: Vec<f64> = var_i.iter().zip(var_j).map(|(a, b)| 1.0 / (a + b)).collect();
    let mut quad = 0.0;
    for zi in &s_i.draws {
        for zj in &s_j.draws {
            quad += zi
                .iter()
                .zip(zj)
                .zip(&inv)
                .map(|((a, b), w)| (a - b) * (a - b) * w)
                .sum::<f64>();
        }
    }
    let kk = (s_i.k() * s_j.k()) as f64;
    0.25 * (log_term + lambda * quad / kk)
}

/// Monte-Carlo squared Euclidean distance over all `K x K` draw pairs.
pub fn euclid_mc(s_i: &SampleSet, s_j: &SampleSet) -> Result<f64> {
    check_k(s_i, s_j)?;
    let mut total = 0.0;
    for zi in &s_i.draws {
        for zj in &s_j.draws {
            total += sq_dist(zi, zj);
        }
    }
    Ok(total / (s_i.k() * s_j.k()) as f64)
}

/// Closed-form `KL(p || q)` for diagonal Gaussians given as `(mean, var)`.
pub fn kl_gauss(p_mean: &[f64], p_var: &[f64], q_mean: &[f64], q_var: &[f64]) -> f64 {
    p_mean
        .iter()
        .zip(p_var)
        .zip(q_mean.iter().zip(q_var))
        .map(|((mp, vp), (mq, vq))| (vq / vp).ln() + vp / vq + (mp - mq).powi(2) / vq - 1.0)
        .sum::<f64>()
        * 0.5
}

/// `(KL(p||q) + KL(q||p)) / 2`.
pub fn js_gauss(p_mean: &[f64], p_var: &[f64], q_mean: &[f64], q_var: &[f64]) -> f64 {
    0.5 * (kl_gauss(p_mean, p_var, q_mean, q_var) + kl_gauss(q_mean, q_var, p_mean, p_var))
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
pub fn wasserstein2_gauss(p_mean: &[f64], p_var: &[f64], q_mean: &[f64], q_var: &[f64]) -> f64 {
    p_mean
        .iter()
        .zip(p_var)
        .zip(q_mean.iter().zip(q_var))
        .map(|((mp, vp), (mq, vq))| (mp - mq).powi(2) + (vp.sqrt() - vq.sqrt()).powi(2))
        .sum()
}

/// Distance between two videos under `metric`. Sample-based metrics use the
/// full `K x K` cross product; closed-form metrics use the mixture moments.
pub fn video_distance(
    s_i: &SampleSet,
    s_j: &SampleSet,
    dist_i: &VideoDistribution,
    dist_j: &VideoDistribution,
    metric: DistanceMetric,
) -> Result<f64> {
    check_k(s_i, s_j)?;
    check_len("video distribution", dist_i.dim(), dist_j.dim())?;
    Ok(match metric.kind {
        DistanceKind::Bhattacharyya => bhatta_mc(s_i, s_j, &dist_i.var, &dist_j.var, metric.lambda),
        DistanceKind::Euclidean => euclid_mc(s_i, s_j)?,
        DistanceKind::Js => js_gauss(&dist_i.mean, &dist_i.var, &dist_j.mean, &dist_j.var),
        DistanceKind::Wasserstein => {
            wasserstein2_gauss(&dist_i.mean, &dist_i.var, &dist_j.mean, &dist_j.var)
        }
    })
}

/// Row-major `B x B` symmetric matrix of video distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub size: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        check_len("distance matrix", size * size, values.len())?;
        Ok(Self { size, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.get(i, i)).collect()
    }
}

/// All pairwise distances for a batch. Upper-triangle entries are computed in
/// parallel and mirrored, so the result does not depend on the thread count.
pub fn distance_matrix(
    samples: &[SampleSet],
    dists: &[VideoDistribution],
    metric: DistanceMetric,
) -> Result<DistanceMatrix> {
    check_len("distance matrix inputs", samples.len(), dists.len())?;
    let b = samples.len();
    let pairs: Vec<(usize, usize)> = (0..b).flat_map(|i| (i..b).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| video_distance(&samples[i], &samples[j], &dists[i], &dists[j], metric))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; b * b];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        values[i * b + j] = v;
        values[j * b + i] = v;
    }
    DistanceMatrix::new(b, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{combine_mog, sample};
    use crate::heads::GaussianEmbed;
    use crate::numerics::Rng;

    fn video(mean: &[f64], var: &[f64]) -> VideoDistribution {
        combine_mog(&[GaussianEmbed {
            mean: mean.to_vec(),
            var: var.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn bhatta_identical_is_zero() {
        let v = bhatta_sample(&[0.3, 0.1], &[0.3, 0.1], &[0.5, 2.0], &[0.5, 2.0], 0.1).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn bhatta_hand_value() {
        let v = bhatta_sample(&[0.0], &[0.0], &[1.0], &[4.0], 0.25).unwrap();
        assert!((v - 0.25 * (25.0f64 / 16.0).ln()).abs() < 1e-12);
        assert!((v - 0.11157).abs() < 1e-5);
    }

    #[test]
    fn bhatta_symmetric() {
        let a = bhatta_sample(&[0.3, -1.0], &[0.1, 0.4], &[0.5, 2.0], &[0.7, 0.2], 0.125).unwrap();
        let b = bhatta_sample(&[0.1, 0.4], &[0.3, -1.0], &[0.7, 0.2], &[0.5, 2.0], 0.125).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bhatta_dimension_mismatch() {
        assert!(bhatta_sample(&[0.0], &[0.0, 1.0], &[1.0], &[1.0], 0.25).is_err());
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_gauss(&[0.2], &[0.7], &[0.2], &[0.7]), 0.0);
        assert!((kl_gauss(&[0.0], &[1.0], &[1.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!((js_gauss(&[0.0], &[1.0], &[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_values() {
        assert_eq!(wasserstein2_gauss(&[0.0], &[1.0], &[0.0], &[1.0]), 0.0);
        assert!((wasserstein2_gauss(&[0.0], &[1.0], &[3.0], &[1.0]) - 9.0).abs() < 1e-15);
        assert!((wasserstein2_gauss(&[0.0], &[1.0], &[0.0], &[4.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn euclid_degenerate_is_mean_gap() {
        let vi = video(&[1.0, 0.0], &[1e-8, 1e-8]);
        let vj = video(&[0.0, 1.0], &[1e-8, 1e-8]);
        let mut rng = Rng::new(3);
        let si = sample(&vi, 4, &mut rng).unwrap();
        let sj = sample(&vj, 4, &mut rng).unwrap();
        assert!((euclid_mc(&si, &sj).unwrap() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn euclid_expectation_at_k500() {
        let vi = video(&[0.5, 0.0, -0.3], &[0.2, 0.1, 0.4]);
        let vj = video(&[0.0, 0.3, 0.1], &[0.3, 0.05, 0.1]);
        let mut rng = Rng::new(21);
        let si = sample(&vi, 500, &mut rng).unwrap();
        let sj = sample(&vj, 500, &mut rng).unwrap();
        let expected = sq_dist(&vi.mean, &vj.mean)
            + vi.var.iter().sum::<f64>()
            + vj.var.iter().sum::<f64>();
        let est = euclid_mc(&si, &sj).unwrap();
        assert!((est - expected).abs() / expected < 0.05, "{est} vs {expected}");
    }

    #[test]
    fn video_distance_symmetric_and_k_checked() {
        let vi = video(&[0.5, 0.0], &[0.2, 0.1]);
        let vj = video(&[0.0, 0.3], &[0.3, 0.05]);
        let mut rng = Rng::new(5);
        let si = sample(&vi, 6, &mut rng).unwrap();
        let sj = sample(&vj, 6, &mut rng).unwrap();
        for kind in DistanceKind::ALL {
            let m = DistanceMetric::for_dim(kind, 2);
            let a = video_distance(&si, &sj, &vi, &vj, m).unwrap();
            let b = video_distance(&sj, &si, &vj, &vi, m).unwrap();
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{kind}");
            assert!(a >= 0.0);
        }
        let short = sample(&vj, 3, &mut rng).unwrap();
        let m = DistanceMetric::for_dim(DistanceKind::Bhattacharyya, 2);
        assert!(video_distance(&si, &short, &vi, &vj, m).is_err());
    }

    #[test]
    fn self_distance_vanishes_with_degenerate_variance() {
        let vi = video(&[0.6, 0.8], &[1e-8, 1e-8]);
        let si = sample(&vi, 5, &mut Rng::new(1)).unwrap();
        for kind in DistanceKind::ALL {
            let m = DistanceMetric::for_dim(kind, 2);
            let v = video_distance(&si, &si, &vi, &vi, m).unwrap();
            if kind == DistanceKind::Bhattacharyya {
                // quadratic term is normalized by the variance, so only the
                // k == k' terms vanish
                assert!(v > 0.0);
            } else {
                assert!(v < 1e-6, "{kind}: {v}");
            }
        }
    }

    #[test]
    fn matrix_is_symmetric() {
        let mut rng = Rng::new(8);
        let dists: Vec<_> = (0..4)
            .map(|i| video(&[i as f64 * 0.1, 0.2], &[0.1 + i as f64 * 0.05, 0.2]))
            .collect();
        let samples: Vec<_> = dists.iter().map(|d| sample(d, 3, &mut rng).unwrap()).collect();
        let m = distance_matrix(&samples, &dists, DistanceMetric::for_dim(DistanceKind::Bhattacharyya, 2)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn parses_metric_names() {
        assert_eq!("BD".parse::<DistanceKind>().unwrap(), DistanceKind::Bhattacharyya);
        assert_eq!("wasserstein".parse::<DistanceKind>().unwrap(), DistanceKind::Wasserstein);
        assert!("cosine".parse::<DistanceKind>().is_err());
        assert!(DistanceMetric::new(DistanceKind::Js, 0.0).is_err());
    }
}
