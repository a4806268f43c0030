//! Match probability, soft and stochastic contrastive losses, the KL
//! regularizer and the full batch objective with its analytic gradient.
//!
//! Pairs are enumerated as `i <= j` in row-major order, self-pairs included
//! and always positive. Both loss sums are divided by the pair count
//! `B (B + 1) / 2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    combine_mog, mog_backward, sample_backward, sample_with_noise, uncertainty_grad, SampleSet,
    VideoDistribution,
};
use crate::error::{Error, Result};
use crate::heads::{clip_backward, forward_clip, ClipCache, GaussianEmbed, ModelParams};
use crate::mining::PairLabels;
use crate::numerics::{dot, norm, sigmoid};

pub const P_CLAMP: f64 = 1e-12;

/// Forward products for one video of a batch.
#[derive(Debug, Clone)]
pub struct VideoForward {
    pub clips: Vec<GaussianEmbed>,
    caches: Vec<ClipCache>,
    pub dist: VideoDistribution,
    pub samples: SampleSet,
}

/// Forward products for a batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub videos: Vec<VideoForward>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn samples(&self) -> Vec<SampleSet> {
        self.videos.iter().map(|v| v.samples.clone()).collect()
    }

    pub fn distributions(&self) -> Vec<VideoDistribution> {
        self.videos.iter().map(|v| v.dist.clone()).collect()
    }

    pub fn uncertainties(&self) -> Vec<f64> {
        self.videos.iter().map(|v| v.dist.uncertainty).collect()
    }
}

/// Embeds every clip, builds each video's mixture and draws samples from the
/// given noise (`noise[v]` holds the `K` standard-normal vectors of video
/// `v`).
pub fn forward_batch(
    params: &ModelParams,
    videos: &[&[Vec<f64>]],
    noise: Vec<Vec<Vec<f64>>>,
) -> Result<Batch> {
    if videos.len() != noise.len() {
        return Err(Error::DimensionMismatch {
            what: "batch noise",
            expected: videos.len(),
            got: noise.len(),
        });
    }
    let videos = videos
        .par_iter()
        .zip(noise.into_par_iter())
        .enumerate()
        .map(|(idx, (clips, eps))| {
            let mut embeds = Vec::with_capacity(clips.len());
            let mut caches = Vec::with_capacity(clips.len());
            for c in clips.iter() {
                let (e, cache) = forward_clip(params, c)?;
                embeds.push(e);
                caches.push(cache);
            }
            let dist = combine_mog(&embeds)?;
            let samples = sample_with_noise(&dist, idx, eps)?;
            Ok(VideoForward {
                clips: embeds,
                caches,
                dist,
                samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { videos })
}

/// `(1/K^2) sum_k sum_k' sigmoid(-a ||z_i^k - z_j^k'|| + b)`.
pub fn match_probability(s_i: &SampleSet, s_j: &SampleSet, a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    for zi in &s_i.draws {
        for zj in &s_j.draws {
            let d = zi
                .iter()
                .zip(zj)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            total += sigmoid(-a * d + b);
        }
    }
    total / (s_i.k() * s_j.k()) as f64
}

/// `-log p` for positives, `-log(1 - p)` otherwise, with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn soft_contrastive(is_positive: bool, p_match: f64) -> f64 {
    let p = p_match.clamp(P_CLAMP, 1.0 - P_CLAMP);
    if is_positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn soft_contrastive_grad(is_positive: bool, p_match: f64) -> f64 {
    if !(P_CLAMP..=1.0 - P_CLAMP).contains(&p_match) {
        return 0.0;
    }
    if is_positive {
        -1.0 / p_match
    } else {
        1.0 / (1.0 - p_match)
    }
}

/// Soft loss attenuated by the pair's uncertainties plus the log-uncertainty
/// penalty.
pub fn stochastic_contrastive(soft: f64, u_i: f64, u_j: f64) -> f64 {
    soft / (4.0 * u_i * u_j) + 0.5 * (u_i.ln() + u_j.ln())
}

/// Mean over a video's clips of `KL(N(mu_n, diag sigma_n^2) || N(0, I))`.
pub fn kl_video(clips: &[GaussianEmbed]) -> f64 {
    let n = clips.len() as f64;
    clips
        .iter()
        .map(|c| {
            0.5 * c
                .mean
                .iter()
                .zip(&c.var)
                .map(|(m, v)| v + m * m - v.ln() - 1.0)
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

/// KL regularizer of a pair: the two videos' terms added.
pub fn kl_regularizer(clips_i: &[GaussianEmbed], clips_j: &[GaussianEmbed]) -> f64 {
    kl_video(clips_i) + kl_video(clips_j)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub i: usize,
    pub j: usize,
    pub positive: bool,
    pub match_prob: f64,
    pub soft: f64,
    pub stoc: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean stochastic contrastive loss over pairs.
    pub stoc: f64,
    /// Mean KL regularizer over pairs.
    pub kl: f64,
    pub beta: f64,
    pub pairs: Vec<PairTerm>,
    pub uncertainties: Vec<f64>,
}

fn canonical_pairs(b: usize) -> Vec<(usize, usize)> {
    (0..b).flat_map(|i| (i..b).map(move |j| (i, j))).collect()
}

fn check_batch(batch: &Batch, labels: &PairLabels) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    if labels.batch_size != batch.len() {
        return Err(Error::DimensionMismatch {
            what: "pair labels",
            expected: batch.len(),
            got: labels.batch_size,
        });
    }
    Ok(())
}

struct PairGrad {
    term: PairTerm,
    d_draws_i: Vec<Vec<f64>>,
    d_draws_j: Vec<Vec<f64>>,
    du_i: f64,
    du_j: f64,
    d_a: f64,
    d_b: f64,
}

/// Value and gradient of one pair's stochastic term, scaled by `weight`.
fn pair_grad(
    batch: &Batch,
    labels: &PairLabels,
    (i, j): (usize, usize),
    a: f64,
    b: f64,
    weight: f64,
    kl: &[f64],
) -> PairGrad {
    let vi = &batch.videos[i];
    let vj = &batch.videos[j];
    let positive = labels.is_positive(i, j);
    let (u_i, u_j) = (vi.dist.uncertainty, vj.dist.uncertainty);
    let p = match_probability(&vi.samples, &vj.samples, a, b);
    let soft = soft_contrastive(positive, p);
    let stoc = stochastic_contrastive(soft, u_i, u_j);

    let d_soft = weight / (4.0 * u_i * u_j);
    let du_i = weight * (-soft / (4.0 * u_i * u_i * u_j) + 0.5 / u_i);
    let du_j = weight * (-soft / (4.0 * u_i * u_j * u_j) + 0.5 / u_j);
    let d_p = d_soft * soft_contrastive_grad(positive, p);

    let k = vi.samples.k();
    let dim = vi.dist.dim();
    let mut d_draws_i = vec![vec![0.0; dim]; k];
    let mut d_draws_j = vec![vec![0.0; dim]; vj.samples.k()];
    let mut d_a = 0.0;
    let mut d_b = 0.0;
    let kk = (k * vj.samples.k()) as f64;
    if d_p != 0.0 {
        let mut delta = vec![0.0; dim];
        for (ki, zi) in vi.samples.draws.iter().enumerate() {
            for (kj, zj) in vj.samples.draws.iter().enumerate() {
                for ((d, x), y) in delta.iter_mut().zip(zi).zip(zj) {
                    *d = x - y;
                }
                let dist = norm(&delta);
                let s = sigmoid(-a * dist + b);
                let d_t = d_p * s * (1.0 - s) / kk;
                d_a -= d_t * dist;
                d_b += d_t;
                if dist > 0.0 {
                    let coef = -d_t * a / dist;
                    for c in 0..dim {
                        let g = coef * delta[c];
                        d_draws_i[ki][c] += g;
                        d_draws_j[kj][c] -= g;
                    }
                }
            }
        }
    }
    PairGrad {
        term: PairTerm {
            i,
            j,
            positive,
            match_prob: p,
            soft,
            stoc,
            kl: kl[i] + kl[j],
        },
        d_draws_i,
        d_draws_j,
        du_i,
        du_j,
        d_a,
        d_b,
    }
}

fn breakdown(terms: Vec<PairTerm>, beta: f64, uncertainties: Vec<f64>) -> LossBreakdown {
    let n = terms.len() as f64;
    let stoc = terms.iter().map(|t| t.stoc).sum::<f64>() / n;
    let kl = terms.iter().map(|t| t.kl).sum::<f64>() / n;
    LossBreakdown {
        total: stoc + beta * kl,
        stoc,
        kl,
        beta,
        pairs: terms,
        uncertainties,
    }
}

/// Forward value of the batch objective.
pub fn total_loss(
    batch: &Batch,
    labels: &PairLabels,
    params: &ModelParams,
    beta: f64,
) -> Result<LossBreakdown> {
    check_batch(batch, labels)?;
    let (a, b) = (params.a(), params.b);
    let kl: Vec<f64> = batch.videos.iter().map(|v| kl_video(&v.clips)).collect();
    let terms: Vec<PairTerm> = canonical_pairs(batch.len())
        .par_iter()
        .map(|&(i, j)| {
            let vi = &batch.videos[i];
            let vj = &batch.videos[j];
            let positive = labels.is_positive(i, j);
            let p = match_probability(&vi.samples, &vj.samples, a, b);
            let soft = soft_contrastive(positive, p);
            PairTerm {
                i,
                j,
                positive,
                match_prob: p,
                soft,
                stoc: stochastic_contrastive(soft, vi.dist.uncertainty, vj.dist.uncertainty),
                kl: kl[i] + kl[j],
            }
        })
        .collect();
    Ok(breakdown(terms, beta, batch.uncertainties()))
}

/// Batch objective and its gradient with respect to every parameter.
/// Mining labels and sampling noise are held fixed.
pub fn total_loss_and_grad(
    batch: &Batch,
    labels: &PairLabels,
    params: &ModelParams,
    beta: f64,
) -> Result<(LossBreakdown, ModelParams)> {
    check_batch(batch, labels)?;
    let bsz = batch.len();
    let pairs = canonical_pairs(bsz);
    let weight = 1.0 / pairs.len() as f64;
    let (a, b) = (params.a(), params.b);
    let kl: Vec<f64> = batch.videos.iter().map(|v| kl_video(&v.clips)).collect();

    let pair_grads: Vec<PairGrad> = pairs
        .par_iter()
        .map(|&p| pair_grad(batch, labels, p, a, b, weight, &kl))
        .collect();

    // reduce in canonical pair order
    let dim = batch.videos[0].dist.dim();
    let mut d_draws: Vec<Vec<Vec<f64>>> = batch
        .videos
        .iter()
        .map(|v| vec![vec![0.0; dim]; v.samples.k()])
        .collect();
    let mut d_u = vec![0.0; bsz];
    let mut d_a = 0.0;
    let mut d_b = 0.0;
    let mut terms = Vec::with_capacity(pair_grads.len());
    for pg in pair_grads {
        let (i, j) = (pg.term.i, pg.term.j);
        for (acc, g) in d_draws[i].iter_mut().zip(&pg.d_draws_i) {
            for (x, y) in acc.iter_mut().zip(g) {
                *x += y;
            }
        }
        for (acc, g) in d_draws[j].iter_mut().zip(&pg.d_draws_j) {
            for (x, y) in acc.iter_mut().zip(g) {
                *x += y;
            }
        }
        d_u[i] += pg.du_i;
        d_u[j] += pg.du_j;
        d_a += pg.d_a;
        d_b += pg.d_b;
        terms.push(pg.term);
    }

    // each video appears in B + 1 pair slots (twice in its self-pair)
    let kl_weight = beta * weight * (bsz + 1) as f64;

    let per_video: Vec<ModelParams> = batch
        .videos
        .par_iter()
        .enumerate()
        .map(|(v, video)| {
            let (d_mean, mut d_var) = sample_backward(&video.dist, &video.samples, &d_draws[v]);
            for (dv, gu) in d_var.iter_mut().zip(uncertainty_grad(&video.dist)) {
                *dv += d_u[v] * gu;
            }
            let per_clip = mog_backward(&video.dist, &d_mean, &d_var);
            let n = video.clips.len() as f64;
            let mut grad = params.zeros_like();
            for ((clip, cache), (mut dm, mut dv)) in
                video.clips.iter().zip(&video.caches).zip(per_clip)
            {
                if kl_weight != 0.0 {
                    for k in 0..dim {
                        dm[k] += kl_weight * clip.mean[k] / n;
                        dv[k] += kl_weight * 0.5 * (1.0 - 1.0 / clip.var[k]) / n;
                    }
                }
                clip_backward(params, cache, &dm, &dv, &mut grad);
            }
            grad
        })
        .collect();

    let mut grad = params.zeros_like();
    for g in &per_video {
        grad.add_assign(g);
    }
    // a = softplus(a_raw)
    grad.a_raw += d_a * sigmoid(params.a_raw);
    grad.b += d_b;

    Ok((breakdown(terms, beta, batch.uncertainties()), grad))
}

/// InfoNCE over one anchor: `-log(sum_pos e^{s/t} / sum_all e^{s/t})`.
pub fn infonce(pos_sims: &[f64], neg_sims: &[f64], temperature: f64) -> Result<f64> {
    if pos_sims.is_empty() {
        return Err(Error::Empty("InfoNCE needs at least one positive"));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let scaled_pos: Vec<f64> = pos_sims.iter().map(|s| s / temperature).collect();
    let scaled_all: Vec<f64> = pos_sims
        .iter()
        .chain(neg_sims)
        .map(|s| s / temperature)
        .collect();
    Ok(log_sum_exp(&scaled_all) - log_sum_exp(&scaled_pos))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Batch InfoNCE on mixture means with cosine similarity; each anchor's
/// positives are its mined pairs (itself included). Averaged over anchors.
pub fn infonce_baseline(
    dists: &[VideoDistribution],
    labels: &PairLabels,
    temperature: f64,
) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::Empty("InfoNCE batch"));
    }
    if labels.batch_size != dists.len() {
        return Err(Error::DimensionMismatch {
            what: "pair labels",
            expected: dists.len(),
            got: labels.batch_size,
        });
    }
    let mut total = 0.0;
    for i in 0..dists.len() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (j, dj) in dists.iter().enumerate() {
            let s = cosine(&dists[i].mean, &dj.mean);
            if labels.is_positive(i, j) {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        total += infonce(&pos, &neg, temperature)?;
    }
    Ok(total / dists.len() as f64)
}
