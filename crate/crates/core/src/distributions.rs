//! Whole-video mixture distributions built from clip Gaussians.
//!
//! With uniform weights `1/N` the mixture has
//!
//! ```text
//! mu_V      = (1/N) sum_n mu_n
//! sigma_V^2 = (1/N) sum_n (sigma_n^2 + mu_n^2) - mu_V^2
//! ```
//!
//! per dimension. The scalar uncertainty of a video is the geometric mean of
//! `sigma_V^2`, evaluated in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{GaussianEmbed, VAR_FLOOR};
use crate::numerics::{normal_vector, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDistribution {
    pub components: Vec<GaussianEmbed>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub uncertainty: f64,
    /// Dimensions where cancellation pushed the variance under the floor.
    #[serde(default)]
    pub clamped: Vec<bool>,
}

impl VideoDistribution {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

pub fn combine_mog(clips: &[GaussianEmbed]) -> Result<VideoDistribution> {
    let first = clips.first().ok_or(Error::Empty("mixture needs at least one clip"))?;
    let d = first.dim();
    for c in clips {
        if c.mean.len() != d || c.var.len() != d {
            return Err(Error::DimensionMismatch {
                what: "mixture component",
                expected: d,
                got: c.mean.len().min(c.var.len()),
            });
        }
    }
    let n = clips.len() as f64;
    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d];
    for c in clips {
        for k in 0..d {
            mean[k] += c.mean[k];
            second[k] += c.var[k] + c.mean[k] * c.mean[k];
        }
    }
    let mut clamped = vec![false; d];
    let mut var = vec![0.0; d];
    for k in 0..d {
        mean[k] /= n;
        let v = second[k] / n - mean[k] * mean[k];
        if v < VAR_FLOOR {
            clamped[k] = true;
            var[k] = VAR_FLOOR;
        } else {
            var[k] = v;
        }
    }
    let uncertainty = geometric_mean(&var);
    Ok(VideoDistribution {
        components: clips.to_vec(),
        mean,
        var,
        uncertainty,
        clamped,
    })
}

fn geometric_mean(var: &[f64]) -> f64 {
    (var.iter().map(|v| v.ln()).sum::<f64>() / var.len() as f64).exp()
}

/// Geometric mean of the mixture variance.
pub fn uncertainty(dist: &VideoDistribution) -> f64 {
    geometric_mean(&dist.var)
}

/// `d u / d sigma_V^2` for `u = exp(mean_d log sigma_V^2_d)`.
pub fn uncertainty_grad(dist: &VideoDistribution) -> Vec<f64> {
    let d = dist.dim() as f64;
    dist.var.iter().map(|v| dist.uncertainty / (d * v)).collect()
}

/// Pulls gradients w.r.t. `(mu_V, sigma_V^2)` back to each component's
/// `(mean, var)`.
pub fn mog_backward(
    dist: &VideoDistribution,
    d_mean: &[f64],
    d_var: &[f64],
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let n = dist.components.len() as f64;
    let d = dist.dim();
    let d_var_eff: Vec<f64> = (0..d)
        .map(|k| if dist.clamped[k] { 0.0 } else { d_var[k] })
        .collect();
    // total gradient reaching mu_V, including the -mu_V^2 term
    let d_mu_v: Vec<f64> = (0..d)
        .map(|k| d_mean[k] - 2.0 * dist.mean[k] * d_var_eff[k])
        .collect();
    dist.components
        .iter()
        .map(|c| {
            let dm = (0..d)
                .map(|k| (d_mu_v[k] + 2.0 * c.mean[k] * d_var_eff[k]) / n)
                .collect();
            let dv = d_var_eff.iter().map(|g| g / n).collect();
            (dm, dv)
        })
        .collect()
}

/// `K` reparameterized draws `z = sigma_V * eps + mu_V` and their noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub video: usize,
    pub draws: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn k(&self) -> usize {
        self.draws.len()
    }
}

/// Standard-normal noise for `k` draws in `d` dimensions.
pub fn draw_noise(rng: &mut Rng, k: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("sample count K must be >= 1".into()));
    }
    (0..k).map(|_| normal_vector(rng, d)).collect()
}

pub fn sample(dist: &VideoDistribution, k: usize, rng: &mut Rng) -> Result<SampleSet> {
    let noise = draw_noise(rng, k, dist.dim())?;
    sample_with_noise(dist, 0, noise)
}

/// Reparameterized draws from fixed noise vectors.
pub fn sample_with_noise(
    dist: &VideoDistribution,
    video: usize,
    noise: Vec<Vec<f64>>,
) -> Result<SampleSet> {
    if noise.is_empty() {
        return Err(Error::InvalidConfig("sample count K must be >= 1".into()));
    }
    let std = dist.std();
    let mut draws = Vec::with_capacity(noise.len());
    for eps in &noise {
        if eps.len() != dist.dim() {
            return Err(Error::DimensionMismatch {
                what: "sampling noise",
                expected: dist.dim(),
                got: eps.len(),
            });
        }
        draws.push(
            eps.iter()
                .zip(&std)
                .zip(&dist.mean)
                .map(|((e, s), m)| s * e + m)
                .collect(),
        );
    }
    Ok(SampleSet { video, draws, noise })
}

/// Pulls gradients w.r.t. each draw back to `(mu_V, sigma_V^2)`.
pub fn sample_backward(
    dist: &VideoDistribution,
    samples: &SampleSet,
    d_draws: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>) {
    let d = dist.dim();
    let mut d_mean = vec![0.0; d];
    let mut d_var = vec![0.0; d];
    let std = dist.std();
    for (dz, eps) in d_draws.iter().zip(&samples.noise) {
        for k in 0..d {
            d_mean[k] += dz[k];
            d_var[k] += dz[k] * eps[k] / (2.0 * std[k]);
        }
    }
    (d_mean, d_var)
}
