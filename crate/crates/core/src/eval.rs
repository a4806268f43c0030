//! Evaluation on frozen parameters: retrieval, linear probing, mining
//! precision/recall, corruption studies and uncertainty binning.
//!
//! Videos are embedded from all of their clips. Every random draw made here
//! comes from a generator derived from the evaluation seed and the video id,
//! so results do not depend on corpus order or thread count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Corpus, Video, UNLABELED};
use crate::distances::{distance_matrix, DistanceMetric};
use crate::distributions::{combine_mog, draw_noise, sample_with_noise, SampleSet, VideoDistribution};
use crate::error::{Error, Result};
use crate::heads::{embed_clip, ModelParams};
use crate::losses::{cosine, match_probability};
use crate::mining::{mine_pairs, mining_counts, MiningCounts, MiningMode};
use crate::numerics::{mean, Rng};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];
const RANKED_KEEP: usize = 20;

const STREAM_RETRIEVAL: u64 = 1;
const STREAM_PROBE_TRAIN: u64 = 2;
const STREAM_PROBE_TEST: u64 = 3;
const STREAM_MINING: u64 = 4;
const STREAM_CORRUPT: u64 = 5;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator for one video and one purpose under `seed`.
pub fn video_rng(seed: u64, purpose: u64, id: &str) -> Rng {
    Rng::new(seed).split(purpose).split(fnv1a(id))
}

pub fn embed_video(params: &ModelParams, video: &Video) -> Result<VideoDistribution> {
    let clips = video
        .clips
        .iter()
        .map(|c| embed_clip(params, c))
        .collect::<Result<Vec<_>>>()?;
    combine_mog(&clips)
}

pub fn embed_corpus(params: &ModelParams, corpus: &Corpus) -> Result<Vec<VideoDistribution>> {
    corpus.videos.par_iter().map(|v| embed_video(params, v)).collect()
}

fn sample_corpus(
    dists: &[VideoDistribution],
    corpus: &Corpus,
    k: usize,
    seed: u64,
    purpose: u64,
) -> Result<Vec<SampleSet>> {
    dists
        .par_iter()
        .zip(corpus.videos.par_iter())
        .enumerate()
        .map(|(i, (d, v))| {
            let mut rng = video_rng(seed, purpose, &v.id);
            sample_with_noise(d, i, draw_noise(&mut rng, k, d.dim())?)
        })
        .collect()
}

/// Mean predicted clip variance over every clip and dimension.
pub fn mean_clip_variance(params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    let per_video: Vec<f64> = corpus
        .videos
        .par_iter()
        .map(|v| {
            let mut s = 0.0;
            let mut n = 0usize;
            for c in &v.clips {
                let e = embed_clip(params, c)?;
                s += e.var.iter().sum::<f64>();
                n += e.var.len();
            }
            Ok(s / n as f64)
        })
        .collect::<Result<_>>()?;
    if per_video.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(mean(&per_video))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Monte-Carlo match probability over `K x K` draws.
    Match,
    /// Cosine between mixture means; no sampling.
    Cosine,
}

impl Similarity {
    pub fn name(self) -> &'static str {
        match self {
            Similarity::Match => "match",
            Similarity::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" | "match-probability" => Ok(Similarity::Match),
            "cosine" => Ok(Similarity::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown similarity '{other}' (expected match or cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub label: i64,
    /// Ids of the best gallery items, most similar first.
    pub ranked: Vec<String>,
    /// 1-based rank of the first same-class gallery item.
    pub first_hit: Option<usize>,
    /// False when the query's class has no other gallery member.
    pub evaluated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub similarity: Similarity,
    pub recall_at: Vec<(usize, f64)>,
    pub evaluated: usize,
    pub excluded: usize,
    pub queries: Vec<QueryResult>,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Ranks `gallery` for every query. A gallery item sharing the query's id
/// is the query itself and is skipped. Ties are broken by ascending id.
pub fn retrieve(
    queries: &Corpus,
    gallery: &Corpus,
    params: &ModelParams,
    similarity: Similarity,
    k: usize,
    eval_seed: u64,
) -> Result<RetrievalReport> {
    if gallery.is_empty() {
        return Err(Error::Empty("retrieval gallery"));
    }
    let qd = embed_corpus(params, queries)?;
    let gd = embed_corpus(params, gallery)?;
    let (qs, gs) = match similarity {
        Similarity::Match => (
            sample_corpus(&qd, queries, k, eval_seed, STREAM_RETRIEVAL)?,
            sample_corpus(&gd, gallery, k, eval_seed, STREAM_RETRIEVAL)?,
        ),
        Similarity::Cosine => (Vec::new(), Vec::new()),
    };
    let (a, b) = (params.a(), params.b);
    let results: Vec<QueryResult> = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = &queries.videos[qi];
            let mut scored: Vec<(f64, usize)> = gallery
                .videos
                .iter()
                .enumerate()
                .filter(|(_, g)| g.id != q.id)
                .map(|(gi, _)| {
                    let s = match similarity {
                        Similarity::Match => match_probability(&qs[qi], &gs[gi], a, b),
                        Similarity::Cosine => cosine(&qd[qi].mean, &gd[gi].mean),
                    };
                    (s, gi)
                })
                .collect();
            scored.sort_by(|x, y| {
                y.0.total_cmp(&x.0)
                    .then_with(|| gallery.videos[x.1].id.cmp(&gallery.videos[y.1].id))
            });
            let evaluated =
                q.label != UNLABELED && scored.iter().any(|&(_, gi)| gallery.videos[gi].label == q.label);
            let first_hit = if evaluated {
                scored
                    .iter()
                    .position(|&(_, gi)| gallery.videos[gi].label == q.label)
                    .map(|p| p + 1)
            } else {
                None
            };
            QueryResult {
                id: q.id.clone(),
                label: q.label,
                ranked: scored
                    .iter()
                    .take(RANKED_KEEP)
                    .map(|&(_, gi)| gallery.videos[gi].id.clone())
                    .collect(),
                first_hit,
                evaluated,
            }
        })
        .collect();
    let evaluated = results.iter().filter(|r| r.evaluated).count();
    let recall_at = RECALL_KS
        .iter()
        .map(|&kk| {
            let hits = results
                .iter()
                .filter(|r| r.first_hit.is_some_and(|h| h <= kk))
                .count();
            let r = if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 };
            (kk, r)
        })
        .collect();
    Ok(RetrievalReport {
        similarity,
        recall_at,
        evaluated,
        excluded: results.len() - evaluated,
        queries: results,
    })
}

/// Softmax classifier `D -> C` trained by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub classes: Vec<i64>,
    dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.1;

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in z.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in z.iter_mut() {
        *x /= s;
    }
}

impl Probe {
    /// Zero-initialized; `PROBE_STEPS` steps with cosine-decayed rate.
    pub fn fit(xs: &[Vec<f64>], ys: &[i64]) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Empty("probe training set"));
        }
        let mut classes: Vec<i64> = ys.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::InvalidConfig(
                "linear probe needs at least two classes in the training set".into(),
            ));
        }
        let d = xs[0].len();
        let c = classes.len();
        let targets: Vec<usize> = ys.iter().map(|y| classes.binary_search(y).unwrap()).collect();
        let mut p = Probe {
            classes,
            dim: d,
            weight: vec![0.0; c * d],
            bias: vec![0.0; c],
        };
        let n = xs.len() as f64;
        for step in 0..PROBE_STEPS {
            let lr = PROBE_LR * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / PROBE_STEPS as f64).cos());
            let mut gw = vec![0.0; c * d];
            let mut gb = vec![0.0; c];
            for (x, &t) in xs.iter().zip(&targets) {
                let mut z = p.logits(x);
                softmax_in_place(&mut z);
                z[t] -= 1.0;
                for k in 0..c {
                    gb[k] += z[k];
                    for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += z[k] * xi;
                    }
                }
            }
            for (w, g) in p.weight.iter_mut().zip(&gw) {
                *w -= lr * g / n;
            }
            for (w, g) in p.bias.iter_mut().zip(&gb) {
                *w -= lr * g / n;
            }
        }
        Ok(p)
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|k| {
                self.bias[k]
                    + self.weight[k * self.dim..(k + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Class whose softmax probability, averaged over `xs`, is largest.
    pub fn predict_mean(&self, xs: &[Vec<f64>]) -> i64 {
        let mut acc = vec![0.0; self.classes.len()];
        for x in xs {
            let mut z = self.logits(x);
            softmax_in_place(&mut z);
            for (a, p) in acc.iter_mut().zip(&z) {
                *a += p;
            }
        }
        let best = (0..acc.len())
            .max_by(|&i, &j| acc[i].total_cmp(&acc[j]).then(j.cmp(&i)))
            .unwrap_or(0);
        self.classes[best]
    }
}

/// Top-1 accuracy of a probe trained on each training video's mixture mean
/// plus `k` draws, predicting test videos from `k` draws each.
pub fn linear_probe(
    train: &Corpus,
    test: &Corpus,
    params: &ModelParams,
    k: usize,
    eval_seed: u64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("probe test set"));
    }
    let td = embed_corpus(params, train)?;
    let ts = sample_corpus(&td, train, k, eval_seed, STREAM_PROBE_TRAIN)?;
    let mut xs = Vec::with_capacity(train.len() * (k + 1));
    let mut ys = Vec::with_capacity(xs.capacity());
    for ((d, s), v) in td.iter().zip(&ts).zip(&train.videos) {
        if v.label == UNLABELED {
            continue;
        }
        xs.push(d.mean.clone());
        ys.push(v.label);
        for z in &s.draws {
            xs.push(z.clone());
            ys.push(v.label);
        }
    }
    let probe = Probe::fit(&xs, &ys)?;
    let ed = embed_corpus(params, test)?;
    let es = sample_corpus(&ed, test, k, eval_seed, STREAM_PROBE_TEST)?;
    let correct = es
        .iter()
        .zip(&test.videos)
        .filter(|(s, v)| probe.predict_mean(&s.draws) == v.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRow {
    pub checkpoint: String,
    pub metric: String,
    /// Mean adaptive threshold over evaluation batches.
    pub tau: f64,
    pub mined: usize,
    pub true_positive: usize,
    pub same_class: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Adaptive-threshold mining precision/recall for every checkpoint and
/// metric. The corpus is shuffled once with the evaluation seed and cut
/// into batches of `batch_size` (a shorter tail batch is dropped unless it
/// is the only one); counts are summed over batches.
pub fn mining_curve(
    corpus: &Corpus,
    checkpoints: &[(String, ModelParams)],
    metrics: &[DistanceMetric],
    k: usize,
    batch_size: usize,
    eval_seed: u64,
) -> Result<Vec<MiningRow>> {
    if !corpus.is_labeled() {
        return Err(Error::InvalidConfig("mining curves need a fully labeled corpus".into()));
    }
    if batch_size < 2 {
        return Err(Error::InvalidConfig("mining batches need at least two videos".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    Rng::new(eval_seed).split(STREAM_MINING).shuffle(&mut order);
    let mut batches: Vec<&[usize]> = order.chunks_exact(batch_size.min(order.len())).collect();
    if batches.is_empty() {
        return Err(Error::Empty("mining corpus"));
    }
    batches.retain(|b| b.len() >= 2);
    let mut rows = Vec::new();
    for (name, params) in checkpoints {
        let dists = embed_corpus(params, corpus)?;
        let samples = sample_corpus(&dists, corpus, k, eval_seed, STREAM_MINING)?;
        for metric in metrics {
            let mut counts = MiningCounts::default();
            let mut taus = Vec::with_capacity(batches.len());
            for idx in &batches {
                let s: Vec<SampleSet> = idx.iter().map(|&i| samples[i].clone()).collect();
                let d: Vec<VideoDistribution> = idx.iter().map(|&i| dists[i].clone()).collect();
                let dm = distance_matrix(&s, &d, *metric)?;
                let labels = mine_pairs(&dm, MiningMode::Adaptive, 0.0)?;
                let truth: Vec<i64> = idx.iter().map(|&i| corpus.videos[i].label).collect();
                counts.add(mining_counts(&labels, &truth)?);
                taus.push(labels.tau);
            }
            let (precision, recall) = counts.precision_recall();
            rows.push(MiningRow {
                checkpoint: name.clone(),
                metric: metric.kind.name().to_string(),
                tau: mean(&taus),
                mined: counts.mined,
                true_positive: counts.true_positive,
                same_class: counts.same_class,
                precision,
                recall,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    /// Clip features averaged with clips of videos from other classes.
    Mixed,
    /// A fraction of feature coordinates replaced by standard-normal noise.
    Masked,
}

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Corruption::Mixed => "mixed",
            Corruption::Masked => "masked",
        }
    }

    /// Mix counts `1..=5` or mask ratios `0, 0.2, ..., 0.8`.
    pub fn levels(self) -> Vec<f64> {
        match self {
            Corruption::Mixed => vec![1.0, 2.0, 3.0, 4.0, 5.0],
            Corruption::Masked => vec![0.0, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Corruption::Mixed),
            "masked" => Ok(Corruption::Masked),
            other => Err(Error::InvalidConfig(format!(
                "unknown corruption family '{other}' (expected mixed or masked)"
            ))),
        }
    }
}

/// Replaces each clip by the mean of itself and `m - 1` clips taken from
/// videos of `m - 1` distinct other classes. Labels are kept.
pub fn corrupt_mixed(corpus: &Corpus, m: usize, rng: &mut Rng) -> Result<Corpus> {
    if m == 0 {
        return Err(Error::InvalidConfig("mix level must be >= 1".into()));
    }
    if m == 1 {
        return Ok(corpus.clone());
    }
    let mut by_class: Vec<(i64, Vec<usize>)> = Vec::new();
    for (i, v) in corpus.videos.iter().enumerate() {
        match by_class.iter_mut().find(|(l, _)| *l == v.label) {
            Some((_, idx)) => idx.push(i),
            None => by_class.push((v.label, vec![i])),
        }
    }
    if by_class.len() < m {
        return Err(Error::InvalidConfig(format!(
            "mix level {m} needs at least {m} classes, corpus has {}",
            by_class.len()
        )));
    }
    let mut out = corpus.clone();
    for (vi, video) in out.videos.iter_mut().enumerate() {
        let own = by_class
            .iter()
            .position(|(l, _)| *l == corpus.videos[vi].label)
            .unwrap_or(0);
        let others: Vec<usize> = (0..by_class.len()).filter(|&c| c != own).collect();
        for clip in video.clips.iter_mut() {
            let picks = rng.choose_distinct(others.len(), m - 1);
            for p in picks {
                let members = &by_class[others[p]].1;
                let src = &corpus.videos[members[rng.below(members.len())]];
                let sc = &src.clips[rng.below(src.clips.len())];
                for (x, y) in clip.iter_mut().zip(sc) {
                    *x += y;
                }
            }
            for x in clip.iter_mut() {
                *x /= m as f64;
            }
        }
    }
    Ok(out)
}

/// Number of coordinates replaced at ratio `rho` in dimension `f`.
pub fn masked_count(rho: f64, f: usize) -> usize {
    // guard against products like 0.6 * 5 = 3.0000000000000004
    ((rho * f as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Replaces a uniformly chosen `ceil(rho * F)` subset of each clip's
/// coordinates with fresh standard-normal draws.
pub fn corrupt_masked(corpus: &Corpus, rho: f64, rng: &mut Rng) -> Result<Corpus> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("mask ratio must lie in [0, 1), got {rho}")));
    }
    let mut out = corpus.clone();
    for video in out.videos.iter_mut() {
        for clip in video.clips.iter_mut() {
            let n = masked_count(rho, clip.len());
            for c in rng.choose_distinct(clip.len(), n) {
                clip[c] = rng.normal();
            }
        }
    }
    Ok(out)
}

pub fn corrupt(corpus: &Corpus, family: Corruption, level: f64, rng: &mut Rng) -> Result<Corpus> {
    match family {
        Corruption::Mixed => corrupt_mixed(corpus, level.round() as usize, rng),
        Corruption::Masked => corrupt_masked(corpus, level, rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: f64,
    pub videos: usize,
    pub mean_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Leave-one-out top-1 over evaluated members; `None` when empty.
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub family: Corruption,
    pub levels: Vec<LevelRow>,
    pub bins: Vec<BinRow>,
}

pub const UNCERTAINTY_BINS: usize = 10;

/// Mean uncertainty of the corpus corrupted at each level of `family`.
pub fn level_uncertainty(
    params: &ModelParams,
    corpus: &Corpus,
    family: Corruption,
    eval_seed: u64,
) -> Result<Vec<LevelRow>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    family
        .levels()
        .into_iter()
        .enumerate()
        .map(|(li, level)| {
            let mut rng = Rng::new(eval_seed).split(STREAM_CORRUPT).split(li as u64);
            let c = corrupt(corpus, family, level, &mut rng)?;
            let u: Vec<f64> = embed_corpus(params, &c)?.iter().map(|d| d.uncertainty).collect();
            Ok(LevelRow {
                level,
                videos: c.len(),
                mean_uncertainty: mean(&u),
            })
        })
        .collect()
}

/// Bin index of each value over `bins` equal-width bins spanning
/// `[min, max]`; a constant input lands entirely in bin 0.
pub fn uniform_bins(values: &[f64], bins: usize) -> (Vec<usize>, Vec<f64>) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { hi } else { lo + width * b as f64 })
        .collect();
    let idx = values
        .iter()
        .map(|&v| {
            if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect();
    (idx, edges)
}

/// Clean-corpus uncertainty bins with per-bin leave-one-out top-1.
pub fn uncertainty_bins(
    params: &ModelParams,
    corpus: &Corpus,
    similarity: Similarity,
    k: usize,
    eval_seed: u64,
) -> Result<Vec<BinRow>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let u: Vec<f64> = embed_corpus(params, corpus)?.iter().map(|d| d.uncertainty).collect();
    let report = retrieve(corpus, corpus, params, similarity, k, eval_seed)?;
    let (idx, edges) = uniform_bins(&u, UNCERTAINTY_BINS);
    Ok((0..UNCERTAINTY_BINS)
        .map(|b| {
            let members: Vec<usize> = (0..u.len()).filter(|&i| idx[i] == b).collect();
            let hits: Vec<f64> = members
                .iter()
                .filter(|&&i| report.queries[i].evaluated)
                .map(|&i| (report.queries[i].first_hit == Some(1)) as u8 as f64)
                .collect();
            BinRow {
                bin: b,
                lo: edges[b],
                hi: edges[b + 1],
                count: members.len(),
                top1: if hits.is_empty() { None } else { Some(mean(&hits)) },
            }
        })
        .collect())
}

pub fn uncertainty_analysis(
    params: &ModelParams,
    corpus: &Corpus,
    family: Corruption,
    similarity: Similarity,
    k: usize,
    eval_seed: u64,
) -> Result<UncertaintyReport> {
    Ok(UncertaintyReport {
        family,
        levels: level_uncertainty(params, corpus, family, eval_seed)?,
        bins: uncertainty_bins(params, corpus, similarity, k, eval_seed)?,
    })
}

/// Average ranks, 1-based, with ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either input is constant or the
/// inputs are shorter than two.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, SyntheticSpec};
    use crate::heads::Architecture;

    fn params(f: usize, d: usize) -> ModelParams {
        let arch = Architecture {
            input_dim: f,
            hidden_dims: vec![16],
            embed_dim: d,
        };
        ModelParams::init(&arch, &mut Rng::new(3)).unwrap()
    }

    fn corpus(sep: f64) -> Corpus {
        generate_synthetic(&SyntheticSpec {
            classes: 3,
            videos_per_class: 6,
            feature_dim: 8,
            separation: sep,
            clip_noise_std: 0.1,
            within_std: 0.1,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    /// Identity-like parameters: the variance head is silenced so draws sit
    /// on the mean.
    fn tight(mut p: ModelParams) -> ModelParams {
        p.sigma_head.weight.iter_mut().for_each(|w| *w = 0.0);
        p.sigma_head.bias.iter_mut().for_each(|w| *w = -30.0);
        p
    }

    #[test]
    fn recall_monotone_and_cosine_seed_free() {
        let c = corpus(3.0);
        let p = params(8, 6);
        let a = retrieve(&c, &c, &p, Similarity::Cosine, 5, 1).unwrap();
        let b = retrieve(&c, &c, &p, Similarity::Cosine, 5, 99).unwrap();
        assert_eq!(a, b);
        let m = retrieve(&c, &c, &p, Similarity::Match, 5, 1).unwrap();
        assert_eq!(m, retrieve(&c, &c, &p, Similarity::Match, 5, 1).unwrap());
        for r in [&a, &m] {
            let v: Vec<f64> = r.recall_at.iter().map(|x| x.1).collect();
            assert!(v.windows(2).all(|w| w[0] <= w[1]) && v[3] <= 1.0);
            assert_eq!(r.queries.len(), c.len());
            assert!(r.queries.iter().all(|q| !q.ranked.contains(&q.id)));
        }
    }

    #[test]
    fn separated_classes_retrieve_perfectly() {
        let c = corpus(20.0);
        let p = tight(params(8, 6));
        for s in [Similarity::Cosine, Similarity::Match] {
            let r = retrieve(&c, &c, &p, s, 3, 1).unwrap();
            assert_eq!(r.recall(1), Some(1.0), "{s}");
        }
    }

    #[test]
    fn absent_class_queries_are_excluded() {
        let c = corpus(3.0);
        let gallery = Corpus::new(c.videos.iter().filter(|v| v.label != 2).cloned().collect()).unwrap();
        let r = retrieve(&c, &gallery, &params(8, 6), Similarity::Cosine, 1, 0).unwrap();
        assert_eq!(r.excluded, 6);
        assert_eq!(r.evaluated, 12);
        assert!(retrieve(&c, &Corpus::default(), &params(8, 6), Similarity::Cosine, 1, 0).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let v = |id: &str, label| Video {
            id: id.into(),
            label,
            clips: vec![vec![1.0, 2.0]],
        };
        let c = Corpus::new(vec![v("q", 0), v("c", 1), v("a", 1), v("b", 0)]).unwrap();
        let r = retrieve(&c, &c, &params(2, 3), Similarity::Cosine, 1, 0).unwrap();
        assert_eq!(r.queries[0].ranked, vec!["a", "b", "c"]);
        assert_eq!(r.queries[0].first_hit, Some(2));
    }

    #[test]
    fn probe_separable_and_single_class() {
        let c = corpus(20.0);
        let p = tight(params(8, 6));
        assert_eq!(linear_probe(&c, &c, &p, 4, 0).unwrap(), 1.0);
        let one = Corpus::new(c.videos.iter().filter(|v| v.label == 0).cloned().collect()).unwrap();
        assert!(matches!(linear_probe(&one, &c, &p, 4, 0), Err(Error::InvalidConfig(_))));
        // degenerate variance: draws sit within 1e-4 of the mean
        let c = corpus(6.0);
        let acc = linear_probe(&c, &c, &p, 1, 0).unwrap();
        assert!(acc < 1.0);
        assert_eq!(
            acc,
            linear_probe(&c, &c, &p, 10, 0).unwrap()
        );
    }

    #[test]
    fn mining_curve_clustered_is_perfect() {
        let c = corpus(20.0);
        let p = tight(params(8, 6));
        // Euclidean self-distance is ~0 here, so nothing is mined
        let metric = DistanceMetric::for_dim(crate::distances::DistanceKind::Bhattacharyya, 6);
        let ck = vec![("x".to_string(), p)];
        let a = mining_curve(&c, &ck, &[metric], 4, 18, 5).unwrap();
        assert_eq!(a, mining_curve(&c, &ck, &[metric], 4, 18, 5).unwrap());
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].same_class, 3 * 15);
    }

    #[test]
    fn corruption_properties() {
        let c = corpus(3.0);
        let mut rng = Rng::new(0);
        assert_eq!(corrupt_mixed(&c, 1, &mut rng).unwrap(), c);
        assert_eq!(corrupt_masked(&c, 0.0, &mut rng).unwrap(), c);
        assert!(corrupt_mixed(&c, 4, &mut rng).is_err());
        let m3 = corrupt_mixed(&c, 3, &mut rng).unwrap();
        assert_eq!(m3.len(), c.len());
        assert_eq!(m3.labels(), c.labels());
        assert_eq!(masked_count(0.8, 10), 8);
        assert_eq!(masked_count(0.6, 5), 3);
        let masked = corrupt_masked(&c, 0.5, &mut rng).unwrap();
        for (a, b) in masked.videos.iter().zip(&c.videos) {
            for (x, y) in a.clips.iter().zip(&b.clips) {
                let changed = x.iter().zip(y).filter(|(p, q)| p != q).count();
                assert_eq!(changed, 4);
            }
        }
        // equal sources average to themselves
        let same = Corpus::new(
            (0..3)
                .map(|l| Video {
                    id: format!("{l}"),
                    label: l,
                    clips: vec![vec![2.0, -1.0]],
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(corrupt_mixed(&same, 3, &mut rng).unwrap(), same);
    }

    #[test]
    fn masked_noise_has_unit_variance() {
        let c = Corpus::new(
            (0..2000)
                .map(|i| Video {
                    id: format!("{i}"),
                    label: 0,
                    clips: vec![vec![0.0; 10]],
                })
                .collect(),
        )
        .unwrap();
        let m = corrupt_masked(&c, 0.8, &mut Rng::new(4)).unwrap();
        let vals: Vec<f64> = m.videos.iter().flat_map(|v| v.clips[0].clone()).filter(|&x| x != 0.0).collect();
        assert_eq!(vals.len(), 16000);
        let var = vals.iter().map(|x| x * x).sum::<f64>() / vals.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn bins_partition_and_constant_collapses() {
        let (idx, edges) = uniform_bins(&[0.0, 0.5, 1.0, 0.95], 10);
        assert_eq!(idx, vec![0, 5, 9, 9]);
        assert_eq!(edges.len(), 11);
        let (idx, _) = uniform_bins(&[2.0; 5], 10);
        assert!(idx.iter().all(|&b| b == 0));
        let c = corpus(3.0);
        let rows = uncertainty_bins(&params(8, 6), &c, Similarity::Cosine, 2, 0).unwrap();
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), c.len());
        let lv = level_uncertainty(&params(8, 6), &c, Corruption::Masked, 0).unwrap();
        assert_eq!(lv.len(), 5);
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}
