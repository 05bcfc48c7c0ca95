//! `uivlm`: generate synthetic corpora, train the toy model, predict and
//! score.
//!
//! Exit codes: 0 success, 2 invalid arguments, configuration, corpus or
//! prediction schema, 3 I/O failure, 4 training diverged, 5 checkpoint and
//! vocabulary disagree.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;
use uivlm_core::episode::{corpus_hash, corpus_stats, load_corpus, write_corpus, StoreError};
use uivlm_core::eval::{
    ablation_report, encode_predictions, read_predictions, score_corpus, EvalError, Prediction,
};
use uivlm_core::raster::RasterError;
use uivlm_core::synthetic::{generate_corpus, GeneratorConfig, TaskFamily};
use uivlm_core::{Corpus, Split, Vocab};
use uivlm_model::train::{history_config, loss_curve_csv, train_with};
use uivlm_model::{predict_episodes, Checkpoint, CheckpointError, InferenceModel, TrainError};

use crate::config::ConfigProblem;
use crate::manifest::{file_sha256, sha256_hex, RunManifest};

const MANIFEST: &str = "manifest.json";
const CHECKPOINT: &str = "model.ckpt";
const VOCAB: &str = "vocab.json";
const LOSS_CSV: &str = "loss.csv";

#[derive(Parser)]
#[command(
    name = "uivlm",
    version,
    about = "Screenshot-to-action toy VLM pipeline"
)]
struct Cli {
    /// Log level on stderr.
    #[arg(long, global = true, value_enum, default_value_t = Verbosity::Info)]
    verbosity: Verbosity,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Verbosity {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl From<Verbosity> for log::LevelFilter {
    fn from(v: Verbosity) -> Self {
        match v {
            Verbosity::Error => Self::Error,
            Verbosity::Warn => Self::Warn,
            Verbosity::Info => Self::Info,
            Verbosity::Debug => Self::Debug,
            Verbosity::Trace => Self::Trace,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Generate(GenerateArgs),
    /// Train a model on the train split of a corpus.
    Train(TrainArgs),
    /// Predict every step of one split with a checkpoint.
    Predict(PredictArgs),
    /// Score predictions against a corpus.
    Score(ScoreArgs),
    /// Check a corpus (and optionally a predictions file) without writing.
    Validate(ValidateArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative family weights, e.g. `tap_label=1,two_step_memory=3`.
    #[arg(long)]
    family_mix: Option<String>,
    /// Train, val and test probabilities.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split_fractions: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Config file or inline key=value; repeatable, later values win.
    #[arg(long)]
    config: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn select(self, corpus: &Corpus) -> Corpus {
        match self {
            SplitArg::Train => corpus.filter_split(Split::Train),
            SplitArg::Val => corpus.filter_split(Split::Val),
            SplitArg::Test => corpus.filter_split(Split::Test),
            SplitArg::All => corpus.clone(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Predictions JSONL to write.
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary the checkpoint was trained with [default: vocab.json
    /// beside the checkpoint, else the built-in vocabulary].
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Config file or inline key=value; repeatable.
    #[arg(long)]
    config: Vec<String>,
    /// Second predictions file; adds a comparison table (first minus
    /// second).
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Report JSON [default: `<predictions>.report.json`].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
}

/// Checkpoint and vocabulary disagree.
#[derive(Debug)]
struct VocabMismatch(String);

impl std::fmt::Display for VocabMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VocabMismatch {}

/// Invalid arguments that clap cannot check.
fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigProblem(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VocabMismatch>() {
            return 5;
        }
        if let Some(TrainError::Divergence { .. }) = cause.downcast_ref() {
            return 4;
        }
        let io = cause.is::<std::io::Error>()
            || matches!(cause.downcast_ref(), Some(StoreError::Io { .. }))
            || matches!(cause.downcast_ref(), Some(EvalError::Io { .. }))
            || matches!(cause.downcast_ref(), Some(CheckpointError::Io { .. }))
            || matches!(cause.downcast_ref(), Some(RasterError::Io { .. }));
        if io {
            return 3;
        }
    }
    2
}

/// Writes the primary output; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing to stdout"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.verbosity.into())
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Score(a) => score(a),
        Command::Validate(a) => validate(a),
        Command::Stats(a) => stats(a),
    }
}

fn parse_family_mix(s: &str) -> Result<BTreeMap<TaskFamily, f64>> {
    let mut mix = BTreeMap::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, w) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("--family-mix entry {part:?} is not family=weight")))?;
        let family: TaskFamily = name.trim().parse().map_err(usage)?;
        let w: f64 = w
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad weight {w:?}")))?;
        if !(w >= 0.0 && w.is_finite()) {
            bail!(usage(format!("weight of {name} must be non-negative")));
        }
        mix.insert(family, w);
    }
    let total: f64 = mix.values().sum();
    if total <= 0.0 {
        bail!(usage("--family-mix needs a positive weight"));
    }
    Ok(mix
        .into_iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(f, w)| (f, w / total))
        .collect())
}

fn parse_fractions(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--split-fractions {s:?} is not three numbers")))?;
    v.try_into().map_err(|_| {
        usage(format!(
            "--split-fractions {s:?} needs exactly three values"
        ))
    })
}

fn generate(a: GenerateArgs) -> Result<()> {
    if a.episodes == 0 {
        bail!(usage("--episodes must be at least 1"));
    }
    let mut cfg = GeneratorConfig::new(a.episodes, a.seed);
    if let Some(mix) = &a.family_mix {
        cfg.family_mix = parse_family_mix(mix)?;
    }
    cfg.split_fractions = parse_fractions(&a.split_fractions)?;
    cfg.validate().map_err(usage)?;
    let mut run = RunManifest::start("generate", serde_json::to_value(&cfg)?);
    run.seed("generator", cfg.seed);
    let (corpus, generated) = generate_corpus(&cfg).map_err(usage)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_corpus(&corpus, &a.out)?;
    let hash = corpus_hash(&corpus);
    run.record_output("corpus", hash.clone());
    run.record_output(
        "episodes.jsonl",
        file_sha256(&a.out.join("episodes.jsonl"))?,
    );
    run.config = json!({ "generator": cfg, "generated": generated });
    run.finish(&a.out.join(MANIFEST))?;
    emit(&format!(
        "wrote {} episodes ({} steps) to {}; corpus hash {hash}\n",
        corpus.len(),
        corpus.total_steps(),
        a.out.display()
    ))
}

fn load(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = config::train_config(&a.config)?;
    if a.print_config {
        return emit(&config::render(&cfg));
    }
    let corpus = load(&a.corpus)?;
    let train_set = corpus.filter_split(Split::Train);
    if train_set.is_empty() {
        bail!(usage(format!(
            "{} has no train-split episodes",
            a.corpus.display()
        )));
    }
    let vocab = Vocab::standard();
    let mut run = RunManifest::start(
        "train",
        json!({ "train": cfg, "flat": config::render(&cfg) }),
    );
    run.seed("train", cfg.seed);
    run.input("corpus", corpus_hash(&corpus));
    run.input("vocab", vocab.hash());
    info!(
        "training on {} episodes ({} steps)",
        train_set.len(),
        train_set.total_steps()
    );
    let outcome = train_with(train_set.episodes(), &vocab, &cfg, |p| {
        if p.step % 50 == 0 {
            info!("step {} epoch {} loss {:.4}", p.step, p.epoch, p.loss);
        }
    })?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = Checkpoint {
        model: outcome.params.config.clone(),
        train: cfg.clone(),
        vocab_hash: vocab.hash(),
        params: outcome.params,
    };
    run.write_output(&a.out, CHECKPOINT, &ckpt.to_bytes())?;
    run.write_output(&a.out, VOCAB, vocab.to_json().as_bytes())?;
    run.write_output(&a.out, LOSS_CSV, loss_curve_csv(&outcome.losses).as_bytes())?;
    run.finish(&a.out.join(MANIFEST))?;
    let first = outcome.losses.first().map_or(f64::NAN, |p| p.loss);
    let last = outcome.losses.last().map_or(f64::NAN, |p| p.loss);
    emit(&format!(
        "trained {} steps, loss {first:.4} -> {last:.4}; checkpoint {}\n",
        outcome.steps,
        a.out.join(CHECKPOINT).display()
    ))
}

/// `dir/stem.<suffix>` for a file `dir/stem.ext`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let vocab_path = a.vocab.clone().or_else(|| {
        let p = parent_dir(&a.checkpoint).join(VOCAB);
        p.is_file().then_some(p)
    });
    let vocab = match &vocab_path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Vocab::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Vocab::standard(),
    };
    if vocab.hash() != ckpt.vocab_hash {
        bail!(VocabMismatch(format!(
            "checkpoint was trained with vocabulary {} but {} has hash {}",
            ckpt.vocab_hash,
            vocab_path
                .as_deref()
                .map_or("the built-in vocabulary".into(), |p| p
                    .display()
                    .to_string()),
            vocab.hash()
        )));
    }
    if vocab.len() != ckpt.model.vocab_size {
        bail!(VocabMismatch(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            ckpt.model.vocab_size
        )));
    }
    let corpus = load(&a.corpus)?;
    let eval = a.split.select(&corpus);
    let mut run = RunManifest::start(
        "predict",
        json!({ "split": a.split.name(), "train": ckpt.train }),
    );
    run.input("corpus", corpus_hash(&corpus));
    run.input("checkpoint", file_sha256(&a.checkpoint)?);
    run.input("vocab", vocab.hash());
    if eval.is_empty() {
        warn!("split {} is empty", a.split.name());
    }
    let model = InferenceModel::new(&ckpt.params);
    let history = history_config(&ckpt.train, &ckpt.model);
    let records = predict_episodes(&model, eval.episodes(), &history, &vocab);
    let failures = records
        .iter()
        .filter(|r| matches!(r.prediction, Prediction::DecodeFailure(_)))
        .count();
    let out_dir = parent_dir(&a.out);
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let name = a
        .out
        .file_name()
        .ok_or_else(|| usage("--out must name a file"))?;
    run.write_output(
        out_dir,
        &name.to_string_lossy(),
        &encode_predictions(&records),
    )?;
    run.finish(&sibling(&a.out, MANIFEST))?;
    emit(&format!(
        "wrote {} predictions ({failures} decode failures) to {}\n",
        records.len(),
        a.out.display()
    ))
}

fn score(a: ScoreArgs) -> Result<()> {
    let cfg = config::score_config(&a.config)?;
    let corpus = load(&a.corpus)?;
    let eval = a.split.select(&corpus);
    let preds = read_predictions(&a.predictions)?;
    let report = score_corpus(&eval, &preds, &cfg.matcher(), cfg.aggregation)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| sibling(&a.predictions, "report.json"));
    let mut run = RunManifest::start("score", json!({ "split": a.split.name(), "score": cfg }));
    run.input("corpus", corpus_hash(&corpus));
    run.input("predictions", file_sha256(&a.predictions)?);
    let label = a
        .predictions
        .file_stem()
        .map_or("model".into(), |s| s.to_string_lossy());
    let mut table = report.table(&label);
    let mut doc = serde_json::to_value(&report)?;
    if let Some(base) = &a.baseline {
        let base_preds = read_predictions(base)?;
        run.input("baseline", file_sha256(base)?);
        let ab = ablation_report(&eval, &preds, &base_preds, &cfg.matcher())?;
        let base_label = base
            .file_stem()
            .map_or("baseline".into(), |s| s.to_string_lossy());
        table = ab.table(&label, &base_label);
        doc = json!({ "report": report, "comparison": ab });
    }
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    let out_dir = parent_dir(&out);
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let name = out
        .file_name()
        .ok_or_else(|| usage("--out must name a file"))?;
    run.write_output(out_dir, &name.to_string_lossy(), text.as_bytes())?;
    run.finish(&sibling(&out, MANIFEST))?;
    if report.missing_predictions > 0 {
        warn!(
            "{} steps had no prediction and count as incorrect",
            report.missing_predictions
        );
    }
    emit(&table)
}

fn validate(a: ValidateArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let mut line = format!(
        "corpus ok: {} episodes, {} steps, hash {}",
        corpus.len(),
        corpus.total_steps(),
        corpus_hash(&corpus)
    );
    if let Some(p) = &a.predictions {
        let preds = read_predictions(p)?;
        // Scoring performs the cross-checks against the corpus.
        score_corpus(&corpus, &preds, &Default::default(), Default::default())
            .with_context(|| format!("checking {}", p.display()))?;
        line.push_str(&format!(
            "; predictions ok: {} records, sha256 {}",
            preds.len(),
            sha256_hex(&std::fs::read(p)?)
        ));
    }
    line.push('\n');
    emit(&line)
}

fn stats(a: StatsArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let mut text = serde_json::to_string_pretty(&corpus_stats(&corpus))?;
    text.push('\n');
    emit(&text)
}
