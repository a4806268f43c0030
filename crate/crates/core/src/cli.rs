//! Command-line front end. Every subcommand writes `effective_config.json`
//! plus CSV tables with JSON mirrors into `--out`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data_io::{generate_synthetic, read_corpus, write_atomic, write_corpus, Corpus, SyntheticSpec};
use crate::distances::{DistanceKind, DistanceMetric};
use crate::error::{Error, Result};
use crate::eval::{
    embed_corpus, mean_clip_variance, mining_curve, retrieve, uncertainty_analysis, Corruption,
    Similarity,
};
use crate::heads::ModelParams;
use crate::mining::MiningMode;
use crate::trainer::{load_checkpoint, save_checkpoint, train, train_epoch, EpochMetrics, TrainConfig, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "provico",
    version,
    about = "Probabilistic video contrastive learning on clip features",
    long_about = "Probabilistic video contrastive learning on clip features.\n\n\
        Corpora are JSON Lines, one video per line: {\"id\": str, \"label\": int (-1 = unlabeled), \
        \"clips\": [[f64, ...], ...]}.\n\
        Every subcommand writes effective_config.json and its tables (CSV with a header row, \
        plus a JSON mirror) into --out. Failures print one line `error kind=<tag> msg=<json string>` \
        to stderr and exit nonzero."
)]
pub struct Cli {
    /// Worker threads; 1 is the bit-reproducibility reference.
    #[arg(long, global = true, env = "PROVICO_THREADS")]
    pub threads: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Seed for data generation and training [default: 0, or the config file's seed].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Seed for evaluation-time sampling and corruption.
    #[arg(long, global = true, default_value_t = 1)]
    pub eval_seed: u64,
    /// TOML or JSON config (a SyntheticSpec for gen-data, a TrainConfig for
    /// train and sweep-beta). A previous effective_config.json is accepted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled corpus (class centers on a sphere).
    GenData(GenDataArgs),
    /// Train a model. Writes checkpoint.json (after every epoch),
    /// metrics.csv/json with columns
    /// epoch,lr,batches,loss,stoc,kl,batch_uncertainty,corpus_uncertainty,mining_mode,mined_pairs,precision,recall.
    /// A trailing partial batch is dropped each epoch.
    Train(TrainArgs),
    /// Leave-one-out (or query/gallery) retrieval. Writes retrieval_<sim>.csv
    /// with columns query_id,label,evaluated,first_hit,ranked and
    /// retrieval_<sim>.json with R@1/5/10/20.
    EvalRetrieval(RetrievalArgs),
    /// Adaptive-threshold mining precision/recall per checkpoint and metric.
    /// Writes mining.csv/json with columns
    /// checkpoint,metric,tau,mined,true_positive,same_class,precision,recall.
    EvalMining(MiningArgs),
    /// Uncertainty under mixed or masked clips plus the clean-corpus bin
    /// table. Writes uncertainty_levels_<family>.csv (level,videos,mean_uncertainty),
    /// uncertainty_bins.csv (bin,lo,hi,count,top1) and uncertainty_<family>.json.
    AnalyzeUncertainty(UncertaintyArgs),
    /// Train one model per beta with a shared seed. Writes beta_sweep.csv/json
    /// with columns beta,mean_clip_variance,mean_uncertainty,final_loss.
    SweepBeta(SweepArgs),
    /// Per-video mixture moments. Writes embeddings.csv/json with columns
    /// id,label,mu_0..mu_{D-1},var_0..var_{D-1},u.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Corpus file name inside --out.
    #[arg(long, default_value = "corpus.jsonl")]
    pub output: String,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub videos_per_class: Option<usize>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Class-center radius in units of within-class std.
    #[arg(long, allow_negative_numbers = true)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub within_std: Option<f64>,
    #[arg(long)]
    pub clip_noise_std: Option<f64>,
    /// Log-scale spread of per-video clip noise.
    #[arg(long)]
    pub noise_spread: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Comma-separated hidden widths, e.g. 128,128.
    #[arg(long, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    /// Draws per video K.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Clips per video N.
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// identity-only, fixed or adaptive.
    #[arg(long)]
    pub mining_mode: Option<String>,
    /// bhattacharyya, euclidean, js or wasserstein.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Continue from a checkpoint. Only --epochs may change; the stored
    /// config is used otherwise.
    #[arg(long, conflicts_with_all = [
        "embed_dim", "hidden_dims", "samples", "clips", "batch_size", "lambda", "tau",
        "mining_mode", "metric", "beta", "warmup_epochs", "stage1_epochs", "base_lr",
    ])]
    pub resume: Option<PathBuf>,
    /// Also write snapshots/checkpoint_eNNNN.json every this many epochs
    /// (and before the first epoch); 0 disables.
    #[arg(long, default_value_t = 0)]
    pub snapshot_every: usize,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query corpus; also the gallery unless --gallery is given.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// match or cosine.
    #[arg(long, default_value = "match")]
    pub similarity: String,
    /// Draws per video [default: the checkpoint's K].
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MiningArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// One or more checkpoints (repeat the flag or separate by commas).
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "bhattacharyya,euclidean")]
    pub metrics: Vec<String>,
    /// [default: the first checkpoint's batch size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// mixed (levels 1..5) or masked (ratios 0..0.8).
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value = "match")]
    pub similarity: String,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1e-5,1e-4,1e-3,1e-2", allow_negative_numbers = true)]
    pub betas: Vec<f64>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            report_error("usage", &e.to_string());
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            1
        }
    }
}

fn report_error(kind: &str, msg: &str) {
    let msg = msg.trim().replace('\n', " ");
    eprintln!("error kind={kind} msg={}", Value::String(msg));
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    fs::create_dir_all(&cli.out)?;
    pool.install(|| match &cli.command {
        Command::GenData(a) => cmd_gen_data(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::EvalRetrieval(a) => cmd_eval_retrieval(cli, a),
        Command::EvalMining(a) => cmd_eval_mining(cli, a),
        Command::AnalyzeUncertainty(a) => cmd_analyze_uncertainty(cli, a),
        Command::SweepBeta(a) => cmd_sweep_beta(cli, a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(cli, a),
    })
}

/// Reads a TOML (by extension) or JSON config. A wrapper object carrying a
/// `config` member, as written to effective_config.json, is unwrapped.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = at_path(path, fs::read_to_string(path).map_err(Error::from))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let mut value: Value = if is_toml {
        toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))?
    } else {
        serde_json::from_str(&text)?
    };
    if value.get("command").is_some() {
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
    }
    serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn effective(cli: &Cli, command: &str, seed: u64, inputs: Value, config: Value) -> Value {
    json!({
        "command": command,
        "seed": seed,
        "eval_seed": cli.eval_seed,
        "threads": cli.threads,
        "inputs": inputs,
        "config": config,
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    write_atomic(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        for r in rows {
            c.serialize(r)?;
        }
        c.flush()?;
        Ok(())
    })
}

/// Writes rows whose header is not derivable from a struct.
fn write_csv_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(header)?;
        for r in rows {
            c.write_record(r)?;
        }
        c.flush()?;
        Ok(())
    })
}

/// Prefixes I/O failures with the offending path.
fn at_path<T>(p: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", p.display()))),
        other => other,
    })
}

fn open_corpus(p: &Path) -> Result<Corpus> {
    at_path(p, read_corpus(p))
}

fn open_checkpoint(p: &Path) -> Result<TrainState> {
    at_path(p, load_checkpoint(p))
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn cmd_gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &cli.config {
        Some(p) => load_config(p)?,
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    set!(classes, videos_per_class, clips, feature_dim, separation, within_std, clip_noise_std, noise_spread);
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let corpus = generate_synthetic(&spec)?;
    let path = cli.out.join(&a.output);
    write_corpus(&corpus, &path)?;
    let eff = effective(
        cli,
        "gen-data",
        spec.seed,
        json!({ "output": a.output }),
        serde_json::to_value(&spec)?,
    );
    write_json(&cli.out.join("effective_config.json"), &eff)?;
    println!("wrote {} ({} videos)", path.display(), corpus.len());
    Ok(())
}

fn parse_list<T: std::str::FromStr<Err = Error>>(items: &[String]) -> Result<Vec<T>> {
    items.iter().map(|s| s.trim().parse()).collect()
}

/// Resolves the training config: defaults, then the config file, then flags.
fn resolve_train_config(cli: &Cli, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &cli.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { cfg.$f = v; } )* };
    }
    set!(embed_dim, hidden_dims, samples, clips, batch_size, tau, beta, epochs, stage1_epochs, base_lr);
    if o.lambda.is_some() {
        cfg.lambda = o.lambda;
    }
    if o.warmup_epochs.is_some() {
        cfg.warmup_epochs = o.warmup_epochs;
    }
    if let Some(m) = &o.mining_mode {
        cfg.mining_mode = m.parse::<MiningMode>()?;
    }
    if let Some(m) = &o.metric {
        cfg.metric = m.parse::<DistanceKind>()?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_training_corpus(path: &Path, cfg: &TrainConfig) -> Result<Corpus> {
    let corpus = open_corpus(path)?;
    corpus.require_clips(cfg.clips)?;
    if corpus.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "corpus has {} videos, fewer than batch_size {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    Ok(corpus)
}

fn corpus_feature_dim(corpus: &Corpus, cfg: &TrainConfig) -> Result<usize> {
    let f = corpus.feature_dim().ok_or(Error::Empty("corpus"))?;
    match cfg.feature_dim {
        Some(want) if want != f => Err(Error::DimensionMismatch {
            what: "corpus feature dimension",
            expected: want,
            got: f,
        }),
        _ => Ok(f),
    }
}

fn write_metrics(out: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    write_csv(&out.join("metrics.csv"), metrics)?;
    write_json(&out.join("metrics.json"), metrics)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut state = match &a.resume {
        Some(p) => {
            if cli.config.is_some() || cli.seed.is_some() {
                return Err(Error::InvalidConfig(
                    "--config and --seed cannot change a resumed run".into(),
                ));
            }
            let mut s = open_checkpoint(p)?;
            if let Some(e) = a.overrides.epochs {
                s.config.epochs = e;
                s.config.validate()?;
            }
            s
        }
        None => {
            let cfg = resolve_train_config(cli, &a.overrides)?;
            let corpus = open_corpus(&a.corpus)?;
            let f = corpus_feature_dim(&corpus, &cfg)?;
            TrainState::new(cfg, f)?
        }
    };
    let corpus = load_training_corpus(&a.corpus, &state.config)?;
    if corpus.feature_dim() != Some(state.params.input_dim()) {
        return Err(Error::DimensionMismatch {
            what: "corpus feature dimension",
            expected: state.params.input_dim(),
            got: corpus.feature_dim().unwrap_or(0),
        });
    }
    let eff = effective(
        cli,
        "train",
        state.config.seed,
        json!({
            "corpus": path_value(&a.corpus),
            "resume": a.resume.as_deref().map(path_value),
            "resume_epoch": a.resume.as_ref().map(|_| state.epoch),
            "snapshot_every": a.snapshot_every,
        }),
        serde_json::to_value(&state.config)?,
    );
    write_json(&cli.out.join("effective_config.json"), &eff)?;

    let snap_dir = cli.out.join("snapshots");
    let snapshot = |s: &TrainState| -> Result<()> {
        if a.snapshot_every > 0 && s.epoch.is_multiple_of(a.snapshot_every) {
            fs::create_dir_all(&snap_dir)?;
            save_checkpoint(s, &snap_dir.join(format!("checkpoint_e{:04}.json", s.epoch)))?;
        }
        Ok(())
    };
    if state.epoch == 0 {
        snapshot(&state)?;
    }
    let ckpt = cli.out.join("checkpoint.json");
    train(&mut state, &corpus, |s| {
        let m = s.metrics.last().expect("an epoch was just trained");
        eprintln!(
            "epoch {:>4} lr {:.3e} loss {:.5} u {:.5} mode {} mined {:.2}",
            m.epoch, m.lr, m.loss, m.corpus_uncertainty, m.mining_mode, m.mined_pairs
        );
        save_checkpoint(s, &ckpt)?;
        write_metrics(&cli.out, &s.metrics)?;
        snapshot(s)
    })?;
    // A resume at or past the target epoch still leaves complete outputs.
    save_checkpoint(&state, &ckpt)?;
    write_metrics(&cli.out, &state.metrics)?;
    println!("wrote {} at epoch {}", ckpt.display(), state.epoch);
    Ok(())
}

fn load_params(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let s = open_checkpoint(path)?;
    Ok((s.params, s.config))
}

fn check_corpus_dim(corpus: &Corpus, params: &ModelParams) -> Result<()> {
    match corpus.feature_dim() {
        Some(f) if f != params.input_dim() => Err(Error::DimensionMismatch {
            what: "corpus feature dimension",
            expected: params.input_dim(),
            got: f,
        }),
        None => Err(Error::Empty("corpus")),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct QueryRow<'a> {
    query_id: &'a str,
    label: i64,
    evaluated: bool,
    first_hit: Option<usize>,
    ranked: String,
}

fn cmd_eval_retrieval(cli: &Cli, a: &RetrievalArgs) -> Result<()> {
    let sim: Similarity = a.similarity.parse()?;
    let (params, cfg) = load_params(&a.checkpoint)?;
    let k = a.samples.unwrap_or(cfg.samples);
    if k == 0 {
        return Err(Error::InvalidConfig("--samples must be >= 1".into()));
    }
    let queries = open_corpus(&a.corpus)?;
    let gallery = match &a.gallery {
        Some(p) => open_corpus(p)?,
        None => queries.clone(),
    };
    check_corpus_dim(&queries, &params)?;
    check_corpus_dim(&gallery, &params)?;
    let eff = effective(
        cli,
        "eval-retrieval",
        cfg.seed,
        json!({
            "checkpoint": path_value(&a.checkpoint),
            "corpus": path_value(&a.corpus),
            "gallery": a.gallery.as_deref().map(path_value),
        }),
        json!({ "similarity": sim.name(), "samples": k }),
    );
    write_json(&cli.out.join("effective_config.json"), &eff)?;
    let report = retrieve(&queries, &gallery, &params, sim, k, cli.eval_seed)?;
    let rows: Vec<QueryRow> = report
        .queries
        .iter()
        .map(|q| QueryRow {
            query_id: &q.id,
            label: q.label,
            evaluated: q.evaluated,
            first_hit: q.first_hit,
            ranked: q.ranked.join(" "),
        })
        .collect();
    write_csv(&cli.out.join(format!("retrieval_{}.csv", sim.name())), &rows)?;
    write_json(&cli.out.join(format!("retrieval_{}.json", sim.name())), &report)?;
    for (kk, r) in &report.recall_at {
        println!("R@{kk} {r:.4}");
    }
    Ok(())
}

fn cmd_eval_mining(cli: &Cli, a: &MiningArgs) -> Result<()> {
    let kinds: Vec<DistanceKind> = parse_list(&a.metrics)?;
    if kinds.is_empty() {
        return Err(Error::InvalidConfig("--metrics is empty".into()));
    }
    let corpus = open_corpus(&a.corpus)?;
    let mut checkpoints = Vec::with_capacity(a.checkpoints.len());
    let mut first_cfg = None;
    for p in &a.checkpoints {
        let (params, cfg) = load_params(p)?;
        check_corpus_dim(&corpus, &params)?;
        first_cfg.get_or_insert(cfg);
        checkpoints.push((p.display().to_string(), params));
    }
    let cfg = first_cfg.ok_or(Error::Empty("checkpoint list"))?;
    let metrics: Vec<DistanceMetric> = kinds
        .iter()
        .map(|&kind| match cfg.lambda {
            Some(l) => DistanceMetric::new(kind, l),
            None => Ok(DistanceMetric::for_dim(kind, cfg.embed_dim)),
        })
        .collect::<Result<_>>()?;
    let k = a.samples.unwrap_or(cfg.samples);
    let batch = a.batch_size.unwrap_or(cfg.batch_size);
    let eff = effective(
        cli,
        "eval-mining",
        cfg.seed,
        json!({
            "corpus": path_value(&a.corpus),
            "checkpoints": a.checkpoints.iter().map(|p| path_value(p)).collect::<Vec<_>>(),
        }),
        json!({
            "metrics": kinds.iter().map(|k| k.name()).collect::<Vec<_>>(),
            "samples": k,
            "batch_size": batch,
            "mode": MiningMode::Adaptive.name(),
        }),
    );
    write_json(&cli.out.join("effective_config.json"), &eff)?;
    let rows = mining_curve(&corpus, &checkpoints, &metrics, k, batch, cli.eval_seed)?;
    write_csv(&cli.out.join("mining.csv"), &rows)?;
    write_json(&cli.out.join("mining.json"), &rows)?;
    for r in &rows {
        println!(
            "{} {} precision {:.4} recall {:.4} tau {:.5}",
            r.checkpoint, r.metric, r.precision, r.recall, r.tau
        );
    }
    Ok(())
}

fn cmd_analyze_uncertainty(cli: &Cli, a: &UncertaintyArgs) -> Result<()> {
    let family: Corruption = a.family.parse()?;
    let sim: Similarity = a.similarity.parse()?;
    let (params, cfg) = load_params(&a.checkpoint)?;
    let corpus = open_corpus(&a.corpus)?;
    check_corpus_dim(&corpus, &params)?;
    let k = a.samples.unwrap_or(cfg.samples);
    let eff = effective(
        cli,
        "analyze-uncertainty",
        cfg.seed,
        json!({ "checkpoint": path_value(&a.checkpoint), "corpus": path_value(&a.corpus) }),
        json!({ "family": family.name(), "similarity": sim.name(), "samples": k }),
    );
    write_json(&cli.out.join("effective_config.json"), &eff)?;
    let report = uncertainty_analysis(&params, &corpus, family, sim, k, cli.eval_seed)?;
    write_csv(&cli.out.join(format!("uncertainty_levels_{}.csv", family.name())), &report.levels)?;
    write_csv(&cli.out.join("uncertainty_bins.csv"), &report.bins)?;
    write_json(&cli.out.join(format!("uncertainty_{}.json", family.name())), &report)?;
    for l in &report.levels {
        println!("level {} mean_uncertainty {:.6}", l.level, l.mean_uncertainty);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    beta: f64,
    mean_clip_variance: f64,
    mean_uncertainty: f64,
    final_loss: f64,
}

fn cmd_sweep_beta(cli: &Cli, a: &SweepArgs) -> Result<()> {
    if a.betas.is_empty() {
        return Err(Error::InvalidConfig("--betas is empty".into()));
    }
    if let Some(b) = a.betas.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(Error::InvalidConfig(format!("beta must be >= 0, got {b}")));
    }
    let base = resolve_train_config(cli, &a.overrides)?;
    let corpus = load_training_corpus(&a.corpus, &base)?;
    let f = corpus_feature_dim(&corpus, &base)?;
    let eff = effective(
        cli,
        "sweep-beta",
        base.seed,
        json!({ "corpus": path_value(&a.corpus), "betas": a.betas }),
        serde_json::to_value(&base)?,
    );
    write_json(&cli.out.join("effective_config.json"), &eff)?;
    let mut rows = Vec::with_capacity(a.betas.len());
    for &beta in &a.betas {
        let cfg = TrainConfig { beta, ..base.clone() };
        let mut state = TrainState::new(cfg, f)?;
        while !state.is_done() {
            train_epoch(&mut state, &corpus)?;
        }
        let u: Vec<f64> = embed_corpus(&state.params, &corpus)?
            .iter()
            .map(|d| d.uncertainty)
            .collect();
        let row = SweepRow {
            beta,
            mean_clip_variance: mean_clip_variance(&state.params, &corpus)?,
            mean_uncertainty: u.iter().sum::<f64>() / u.len() as f64,
            final_loss: state.metrics.last().map_or(f64::NAN, |m| m.loss),
        };
        println!("beta {:e} mean_clip_variance {:.6}", row.beta, row.mean_clip_variance);
        rows.push(row);
    }
    write_csv(&cli.out.join("beta_sweep.csv"), &rows)?;
    write_json(&cli.out.join("beta_sweep.json"), &rows)
}

fn cmd_export_embeddings(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let (params, cfg) = load_params(&a.checkpoint)?;
    let corpus = open_corpus(&a.corpus)?;
    check_corpus_dim(&corpus, &params)?;
    let eff = effective(
        cli,
        "export-embeddings",
        cfg.seed,
        json!({ "checkpoint": path_value(&a.checkpoint), "corpus": path_value(&a.corpus) }),
        Value::Null,
    );
    write_json(&cli.out.join("effective_config.json"), &eff)?;
    let dists = embed_corpus(&params, &corpus)?;
    let d = params.embed_dim();
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("mu_{i}")));
    header.extend((0..d).map(|i| format!("var_{i}")));
    header.push("u".into());
    let mut rows = Vec::with_capacity(corpus.len());
    let mut objs = Vec::with_capacity(corpus.len());
    for (v, dist) in corpus.videos.iter().zip(&dists) {
        let mut r = vec![v.id.clone(), v.label.to_string()];
        r.extend(dist.mean.iter().map(|x| x.to_string()));
        r.extend(dist.var.iter().map(|x| x.to_string()));
        r.push(dist.uncertainty.to_string());
        rows.push(r);
        objs.push(json!({
            "id": v.id,
            "label": v.label,
            "mu": dist.mean,
            "var": dist.var,
            "u": dist.uncertainty,
        }));
    }
    write_csv_records(&cli.out.join("embeddings.csv"), &header, &rows)?;
    write_json(&cli.out.join("embeddings.json"), &objs)?;
    println!("wrote {} embeddings", rows.len());
    Ok(())
}
