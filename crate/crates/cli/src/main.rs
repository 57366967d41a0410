//! `varsmooth`: corpus statistics, noising oracles, training and evaluation.
//!
//! Artifacts (TSV, JSON, text) go to stdout; progress and errors go to stderr.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use varsmooth::corpus::{build_vocab_from_text, compute_stats, stats_tsv, MarkovCorpus, TokenStream};
use varsmooth::lm::param_count;
use varsmooth::noising::{verify, Granularity, NoiseKind, NoiseScheme};
use varsmooth::par::Execution;
use varsmooth::trainer::{sweep_gamma, sweep_tsv, train_with, Checkpoint, TrainConfig, TrainError};
use varsmooth::variational::PredictMode;

#[derive(Parser)]
#[command(name = "varsmooth", version, about = "Data noising and variational smoothing for LSTM language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-word corpus statistics as TSV.
    Stats {
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
    },
    /// Compare Monte Carlo and analytic pseudocounts; exits 3 when out of tolerance.
    Verify {
        corpus: PathBuf,
        #[arg(long, default_value = "kn")]
        scheme: NoiseKind,
        #[arg(long, default_value_t = 0.2)]
        gamma: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum relative error over all words.
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        /// Maximum per-word deviation in standard errors.
        #[arg(long, default_value_t = 3.0)]
        z_limit: f64,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        /// Run the trials on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Train a model and print its run report as JSON.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Save the dev-selected model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Perplexity of a text file under a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// mode, mean, sample:S or sample-log:S (defaults to the checkpoint's setting).
        #[arg(long)]
        predict: Option<PredictMode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per gamma and print `gamma<TAB>dev_ppl`.
    SweepGamma {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated values in (0, 1).
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Train the values one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Summarize a checkpoint as JSON.
    Inspect { checkpoint: PathBuf },
    /// Write synthetic Markov-chain text.
    Synth {
        #[arg(long)]
        tokens: usize,
        #[arg(long, default_value_t = 300)]
        vocab: usize,
        #[arg(long, default_value_t = 24)]
        successors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixes the chain; use the same value for every split.
        #[arg(long, default_value_t = 0)]
        chain_seed: u64,
    },
}

/// A config file plus command-line overrides.
#[derive(Args)]
struct RunArgs {
    /// TOML config file (flat key = value).
    config_file: Option<PathBuf>,
    #[arg(long = "config", conflicts_with = "config_file")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scheme: Option<NoiseKind>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    granularity: Option<Granularity>,
    #[arg(long)]
    predict: Option<PredictMode>,
    #[arg(long)]
    elementwise: bool,
    #[arg(long, conflicts_with = "untied")]
    tied: bool,
    #[arg(long)]
    untied: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<TrainConfig, String> {
        let path = self
            .config_file
            .as_ref()
            .or(self.config.as_ref())
            .ok_or("a config file is required (positional or --config)")?;
        let mut cfg = TrainConfig::load(path).map_err(|e| e.to_string())?;
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(s) = self.scheme {
            cfg.scheme = s;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(g) = self.granularity {
            cfg.granularity = g;
        }
        if let Some(p) = self.predict {
            cfg.predict = p;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.elementwise |= self.elementwise;
        if self.tied {
            cfg.tied = true;
        }
        if self.untied {
            cfg.tied = false;
        }
        cfg.validate().map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(cfg)
    }
}

enum Failure {
    Error(String),
    OutOfTolerance,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Write an artifact to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => r,
    }
}

fn log_epoch(r: &varsmooth::trainer::EpochRecord) {
    eprintln!(
        "epoch {:>3}  train_loss {:.4}  dev_ppl {:.3}  lr {:.2e}",
        r.epoch, r.train_loss, r.dev_perplexity, r.learning_rate
    );
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Stats { corpus, min_count } => {
            let text = read(&corpus)?;
            let vocab = build_vocab_from_text(&text, min_count)?;
            let stream = TokenStream::encode(&text, &vocab);
            emit(&stats_tsv(&vocab, &compute_stats(&stream, &vocab)))?;
        }
        Command::Verify { corpus, scheme, gamma, trials, seed, tolerance, z_limit, min_count, sequential } => {
            let text = read(&corpus)?;
            let vocab = build_vocab_from_text(&text, min_count)?;
            let stream = TokenStream::encode(&text, &vocab);
            let stats = compute_stats(&stream, &vocab);
            let s = NoiseScheme::new(scheme, gamma)?;
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let report = verify(&s, &stats, &vocab, &stream, trials, seed, exec)?;
            let passed = report.passes(tolerance, z_limit);
            let mut out = serde_json::to_value(&report)?;
            out["tolerance"] = json!(tolerance);
            out["z_limit"] = json!(z_limit);
            out["passed"] = json!(passed);
            emit(&(serde_json::to_string_pretty(&out)? + "\n"))?;
            if !passed {
                eprintln!(
                    "out of tolerance: max relative error {:.4} (limit {tolerance}), max z {:.2} (limit {z_limit})",
                    report.max_relative_error, report.max_z
                );
                return Err(Failure::OutOfTolerance);
            }
        }
        Command::Train { run, checkpoint } => {
            let cfg = run.load()?;
            let splits = cfg.load_splits()?;
            eprintln!(
                "vocab {}  train {} tokens  dev {} tokens  params {}",
                splits.vocab.len(),
                splits.train.len(),
                splits.valid.len(),
                param_count(&cfg.lm_config(splits.vocab.len()))?
            );
            let outcome = match train_with(&cfg, &splits, log_epoch) {
                Ok(o) => o,
                Err(TrainError::Diverged { epoch, report }) => {
                    emit(&(report.to_json() + "\n"))?;
                    return Err(Failure::Error(format!("training diverged in epoch {epoch}")));
                }
                Err(e) => return Err(e.into()),
            };
            if let Some(path) = checkpoint {
                let ck = Checkpoint { config: cfg, vocab: splits.vocab, stats: splits.stats, params: outcome.params };
                ck.save(&path)?;
                eprintln!("saved {}", path.display());
            }
            emit(&(outcome.report.to_json() + "\n"))?;
        }
        Command::Eval { checkpoint, data, predict, seed } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let text = read(&data)?;
            let mode = predict.unwrap_or(ck.config.predict);
            let ppl = ck.evaluate_text(&text, mode, seed)?;
            emit(&format!("{}\n", json!({ "mode": mode.to_string(), "perplexity": ppl })))?;
        }
        Command::SweepGamma { run, values, sequential } => {
            let cfg = run.load()?;
            let splits = cfg.load_splits()?;
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let rows = sweep_gamma(&cfg, &splits, &values, exec)?;
            emit(&sweep_tsv(&rows))?;
        }
        Command::Inspect { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let tensors: Vec<_> =
                ck.params.tensors().iter().map(|(n, t)| json!({ "name": n, "shape": t.shape() })).collect();
            let out = json!({
                "vocab_size": ck.vocab.len(),
                "param_count": ck.params.count(),
                "tied": ck.params.config.tied,
                "train_tokens": ck.stats.count.iter().sum::<u64>(),
                "tensors": tensors,
                "config": ck.config,
            });
            emit(&(serde_json::to_string_pretty(&out)? + "\n"))?;
        }
        Command::Synth { tokens, vocab, successors, seed, chain_seed } => {
            let m = MarkovCorpus { vocab_size: vocab, successors, chain_seed, ..Default::default() };
            emit(&m.generate(tokens, seed))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::OutOfTolerance) => ExitCode::from(3),
        Err(Failure::Error(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
