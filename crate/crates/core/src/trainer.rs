//! Mini-batch training with Adam, warm-up plus half-cosine learning rate,
//! the two-stage mining schedule and JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{write_atomic, Corpus};
use crate::distances::{distance_matrix, DistanceKind, DistanceMetric};
use crate::distributions::{combine_mog, draw_noise};
use crate::error::{Error, Result};
use crate::heads::{embed_clip, Architecture, ModelParams};
use crate::losses::{forward_batch, total_loss_and_grad};
use crate::mining::{mine_pairs, mining_counts, MiningCounts, MiningMode, PairLabels};
use crate::numerics::{Rng, RngState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Embedding dimension `D`.
    pub embed_dim: usize,
    /// Clip feature dimension `F`; `None` takes it from the corpus.
    pub feature_dim: Option<usize>,
    pub hidden_dims: Vec<usize>,
    /// Draws per video `K`.
    pub samples: usize,
    /// Clips per video `N`.
    pub clips: usize,
    pub batch_size: usize,
    /// Bhattacharyya scale; `None` means `1 / (4 D)`.
    pub lambda: Option<f64>,
    pub tau: f64,
    pub mining_mode: MiningMode,
    pub metric: DistanceKind,
    pub beta: f64,
    pub epochs: usize,
    /// `None` means 10% of `epochs`, rounded down.
    pub warmup_epochs: Option<usize>,
    /// Epochs trained with identity-only positives.
    pub stage1_epochs: usize,
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            feature_dim: None,
            hidden_dims: vec![128, 128],
            samples: 10,
            clips: 2,
            batch_size: 96,
            lambda: None,
            tau: 0.15,
            mining_mode: MiningMode::Fixed,
            metric: DistanceKind::Bhattacharyya,
            beta: 1e-4,
            epochs: 60,
            warmup_epochs: None,
            stage1_epochs: 30,
            base_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 10)
    }

    pub fn distance_metric(&self) -> Result<DistanceMetric> {
        match self.lambda {
            Some(l) => DistanceMetric::new(self.metric, l),
            None => Ok(DistanceMetric::for_dim(self.metric, self.embed_dim)),
        }
    }

    pub fn mode_at(&self, epoch: usize) -> MiningMode {
        if epoch < self.stage1_epochs {
            MiningMode::IdentityOnly
        } else {
            self.mining_mode
        }
    }

    pub fn architecture(&self, feature_dim: usize) -> Architecture {
        Architecture {
            input_dim: feature_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.embed_dim == 0 {
            return bad("embed_dim must be >= 1".into());
        }
        if self.samples == 0 || self.clips == 0 || self.batch_size == 0 {
            return bad("samples K, clips N and batch_size B must be >= 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.warmup() > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup(),
                self.epochs
            ));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be >= 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam decays must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if matches!(self.feature_dim, Some(0)) {
            return bad("feature_dim must be >= 1".into());
        }
        self.distance_metric()?;
        self.architecture(1).validate()
    }
}

/// Learning rate for `epoch`: linear ramp from 0 over the warm-up, then a
/// half-period cosine from `base_lr` towards 0.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let w = config.warmup();
    let e = config.epochs;
    if epoch < w {
        return config.base_lr * epoch as f64 / w as f64;
    }
    let t = (epoch - w) as f64 / (e - w).max(1) as f64;
    config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam first and second moments plus the step count used for bias
/// correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut ModelParams,
        grad: &ModelParams,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        let ps = params.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(grads).zip(ms).zip(vs) {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Zero-based index of the epoch just trained.
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Batch means of the objective and its parts.
    pub loss: f64,
    pub stoc: f64,
    pub kl: f64,
    /// Mean video uncertainty over training batches.
    pub batch_uncertainty: f64,
    /// Mean video uncertainty over the whole corpus after the epoch.
    pub corpus_uncertainty: f64,
    pub mining_mode: MiningMode,
    /// Mined non-self pairs per batch.
    pub mined_pairs: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainState {
    /// Fresh parameters drawn from a stream split off `config.seed`; the
    /// shuffling and sampling stream is separate.
    pub fn new(config: TrainConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        if let Some(f) = config.feature_dim {
            if f != feature_dim {
                return Err(Error::DimensionMismatch {
                    what: "configured feature_dim",
                    expected: f,
                    got: feature_dim,
                });
            }
        }
        let root = Rng::new(config.seed);
        let params = ModelParams::init(&config.architecture(feature_dim), &mut root.split(0))?;
        Ok(Self {
            optimizer: AdamState::new(&params),
            params,
            epoch: 0,
            rng: root.split(1),
            metrics: Vec::new(),
            config,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }
}

/// Closed-form uncertainty of every video under `params`, using all clips.
pub fn corpus_uncertainties(params: &ModelParams, corpus: &Corpus) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    corpus
        .videos
        .par_iter()
        .map(|v| {
            let clips = v
                .clips
                .iter()
                .map(|c| embed_clip(params, c))
                .collect::<Result<Vec<_>>>()?;
            Ok(combine_mog(&clips)?.uncertainty)
        })
        .collect()
}

fn first_non_finite(p: &ModelParams) -> Option<String> {
    p.tensors()
        .iter()
        .zip(p.tensor_names())
        .find(|(t, _)| t.iter().any(|x| !x.is_finite()))
        .map(|(_, n)| n)
}

/// One pass over the corpus. Videos are shuffled with the state generator
/// and the trailing partial batch is dropped. When a video has more clips
/// than `N`, `N` distinct clips are drawn per epoch.
pub fn train_epoch(state: &mut TrainState, corpus: &Corpus) -> Result<()> {
    let cfg = state.config.clone();
    let epoch = state.epoch;
    if epoch >= cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "training already finished ({} epochs)",
            cfg.epochs
        )));
    }
    if corpus.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "corpus has {} videos, fewer than batch size {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    corpus.require_clips(cfg.clips)?;
    let f = corpus.feature_dim().unwrap_or(0);
    if f != state.params.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "corpus feature dimension",
            expected: state.params.input_dim(),
            got: f,
        });
    }
    let metric = cfg.distance_metric()?;
    let mode = cfg.mode_at(epoch);
    let lr = lr_at(epoch, &cfg);
    let labeled = corpus.is_labeled();
    let d = cfg.embed_dim;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    state.rng.shuffle(&mut order);
    let n_batches = corpus.len() / cfg.batch_size;

    let (mut loss, mut stoc, mut kl, mut u_sum, mut mined) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mut counts = MiningCounts::default();
    for (bi, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
        let have = corpus.clips_per_video().unwrap_or(0);
        let mut clip_sets: Vec<Vec<Vec<f64>>> = Vec::with_capacity(idx.len());
        for &v in idx {
            let clips = &corpus.videos[v].clips;
            if have == cfg.clips {
                clip_sets.push(clips.clone());
            } else {
                let pick = state.rng.choose_distinct(have, cfg.clips);
                clip_sets.push(pick.into_iter().map(|c| clips[c].clone()).collect());
            }
        }
        let noise = (0..idx.len())
            .map(|_| draw_noise(&mut state.rng, cfg.samples, d))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<&[Vec<f64>]> = clip_sets.iter().map(|c| c.as_slice()).collect();
        let batch = forward_batch(&state.params, &views, noise)?;

        let labels = if mode == MiningMode::IdentityOnly {
            PairLabels::identity(idx.len())
        } else {
            let dm = distance_matrix(&batch.samples(), &batch.distributions(), metric)?;
            mine_pairs(&dm, mode, cfg.tau)?
        };
        if labeled {
            let truth: Vec<i64> = idx.iter().map(|&v| corpus.videos[v].label).collect();
            counts.add(mining_counts(&labels, &truth)?);
        }
        mined += labels.mined_count();

        let (lb, grad) = total_loss_and_grad(&batch, &labels, &state.params, cfg.beta)?;
        if !lb.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("batch {bi}: loss is {}", lb.total),
            });
        }
        if let Some(name) = first_non_finite(&grad) {
            return Err(Error::Diverged {
                epoch,
                detail: format!("batch {bi}: non-finite gradient in {name}"),
            });
        }
        state.optimizer.update(
            &mut state.params,
            &grad,
            lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        );
        if let Some(name) = first_non_finite(&state.params) {
            return Err(Error::Diverged {
                epoch,
                detail: format!("batch {bi}: non-finite parameter in {name} after update"),
            });
        }
        loss += lb.total;
        stoc += lb.stoc;
        kl += lb.kl;
        u_sum += crate::numerics::mean(&lb.uncertainties);
    }

    let nb = n_batches as f64;
    let corpus_u = corpus_uncertainties(&state.params, corpus)?;
    let (precision, recall) = if labeled && mode != MiningMode::IdentityOnly {
        let (p, r) = counts.precision_recall();
        (Some(p), Some(r))
    } else {
        (None, None)
    };
    state.metrics.push(EpochMetrics {
        epoch,
        lr,
        batches: n_batches,
        loss: loss / nb,
        stoc: stoc / nb,
        kl: kl / nb,
        batch_uncertainty: u_sum / nb,
        corpus_uncertainty: crate::numerics::mean(&corpus_u),
        mining_mode: mode,
        mined_pairs: mined as f64 / nb,
        precision,
        recall,
    });
    state.epoch += 1;
    Ok(())
}

/// Trains until `config.epochs`, calling `on_epoch` after each epoch.
pub fn train(
    state: &mut TrainState,
    corpus: &Corpus,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    while !state.is_done() {
        train_epoch(state, corpus)?;
        on_epoch(state)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub opt_moments: AdamState,
    pub epoch: usize,
    pub rng_state: RngState,
    pub metrics: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: state.config.clone(),
            params: state.params.clone(),
            opt_moments: state.optimizer.clone(),
            epoch: state.epoch,
            rng_state: state.rng.state(),
            metrics: state.metrics.clone(),
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            config: self.config,
            params: self.params,
            optimizer: self.opt_moments,
            epoch: self.epoch,
            rng: Rng::from_state(self.rng_state),
            metrics: self.metrics,
        }
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let ck = Checkpoint::from_state(state);
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, &ck)?;
        std::io::Write::write_all(w, b"\n")?;
        Ok(())
    })
}

/// Byte offset of a 1-based `(line, column)` position reported by the JSON
/// parser.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

fn parse_error(text: &str, e: serde_json::Error) -> Error {
    Error::CheckpointParse {
        offset: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    }
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
    }
    let header: Header = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    let shapes = |p: &ModelParams| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
    let want = shapes(&ck.params);
    if shapes(&ck.opt_moments.m) != want || shapes(&ck.opt_moments.v) != want {
        return Err(Error::CheckpointParse {
            offset: 0,
            msg: "optimizer moments are not shaped like the parameters".into(),
        });
    }
    if !ck.params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    ck.config.validate()?;
    Ok(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_checkpoint(&text)?.into_state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, SyntheticSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            embed_dim: 4,
            hidden_dims: vec![8],
            samples: 3,
            batch_size: 6,
            epochs: 6,
            stage1_epochs: 2,
            base_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn small_corpus() -> Corpus {
        generate_synthetic(&SyntheticSpec {
            classes: 3,
            videos_per_class: 5,
            feature_dim: 6,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 200,
            warmup_epochs: Some(20),
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(10, &cfg), 0.5e-4);
        assert_eq!(lr_at(20, &cfg), 1e-4);
        let expect = 1e-4 * 0.5 * (1.0 + (std::f64::consts::PI * 179.0 / 180.0).cos());
        assert!((lr_at(199, &cfg) - expect).abs() < 1e-20);
        assert!(lr_at(199, &cfg) < 1e-7);
    }

    #[test]
    fn adam_matches_hand_recursion() {
        let arch = Architecture {
            input_dim: 1,
            hidden_dims: vec![1],
            embed_dim: 1,
        };
        let mut p = ModelParams::init(&arch, &mut Rng::new(0)).unwrap();
        p.b = 0.5;
        let mut opt = AdamState::new(&p);
        let mut g = p.zeros_like();
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        // g = 2, then g = -1 on b only
        g.b = 2.0;
        opt.update(&mut p, &g, lr, b1, b2, eps);
        let (m1, v1) = (0.2, 0.004);
        let b_1 = 0.5 - lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + eps);
        assert!((p.b - b_1).abs() < 1e-12);
        g.b = -1.0;
        opt.update(&mut p, &g, lr, b1, b2, eps);
        let m2 = 0.9 * m1 - 0.1;
        let v2 = 0.999 * v1 + 0.001;
        let b_2 = b_1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + eps);
        assert!((p.b - b_2).abs() < 1e-12);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn training_is_deterministic_and_logs_stage() {
        let corpus = small_corpus();
        let run = || {
            let mut s = TrainState::new(small_config(), 6).unwrap();
            train(&mut s, &corpus, |_| Ok(())).unwrap();
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 6);
        for (i, m) in a.metrics.iter().enumerate() {
            assert_eq!(m.epoch, i);
            assert_eq!(m.batches, 2);
            let expect = if i < 2 { MiningMode::IdentityOnly } else { MiningMode::Fixed };
            assert_eq!(m.mining_mode, expect);
        }
        assert!(a.metrics[0].precision.is_none());
        assert!(a.metrics[5].precision.is_some());
    }

    #[test]
    fn checkpoint_round_trip_then_step_matches() {
        let corpus = small_corpus();
        let mut s = TrainState::new(small_config(), 6).unwrap();
        train_epoch(&mut s, &corpus).unwrap();
        train_epoch(&mut s, &corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&s, &path).unwrap();
        let mut r = load_checkpoint(&path).unwrap();
        assert_eq!(r.params, s.params);
        assert_eq!(r.optimizer, s.optimizer);
        assert_eq!(r.rng.state(), s.rng.state());
        train_epoch(&mut s, &corpus).unwrap();
        train_epoch(&mut r, &corpus).unwrap();
        assert_eq!(r.params, s.params);
        assert_eq!(r.metrics, s.metrics);
    }

    #[test]
    fn malformed_checkpoints_are_refused() {
        let s = TrainState::new(small_config(), 6).unwrap();
        let text = serde_json::to_string_pretty(&Checkpoint::from_state(&s)).unwrap();
        let cut = text.len() / 2;
        match parse_checkpoint(&text[..cut]) {
            Err(Error::CheckpointParse { offset, .. }) => assert!(offset <= cut && offset > 0),
            other => panic!("{other:?}"),
        }
        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 7", 1);
        assert!(matches!(
            parse_checkpoint(&bumped),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
        match parse_checkpoint("{\"format_version\": 1,\n  x") {
            Err(Error::CheckpointParse { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_trends_down_on_small_corpus() {
        let corpus = small_corpus();
        let cfg = TrainConfig {
            epochs: 12,
            warmup_epochs: Some(0),
            stage1_epochs: 12,
            ..small_config()
        };
        let mut s = TrainState::new(cfg, 6).unwrap();
        train(&mut s, &corpus, |_| Ok(())).unwrap();
        let l: Vec<f64> = s.metrics.iter().map(|m| m.loss).collect();
        let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        assert!(avg(&l[7..12]) <= avg(&l[0..5]), "{l:?}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { samples: 0, ..TrainConfig::default() },
            TrainConfig { beta: -1.0, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { warmup_epochs: Some(61), ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
        let corpus = small_corpus();
        let mut s = TrainState::new(TrainConfig { batch_size: 100, ..small_config() }, 6).unwrap();
        assert!(train_epoch(&mut s, &corpus).is_err());
    }
}
