//! Training, evaluation and the γ sweep.
//!
//! Batches follow the usual truncated-BPTT pipeline: the token stream is cut
//! into `batch_size` contiguous lanes and walked in windows of `bptt` steps,
//! with the LSTM state carried (detached) from one window to the next.
//! Every lane of every window gets its own seeded noise draw, so runs are
//! reproducible bit for bit.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, CorpusSplits, CorpusStats, TokenStream, Vocabulary, WordId};
use crate::lm::{
    forward, loss_and_grads, param_count, recurrent_masks, target_log_probs, Batch, BatchNoise, LaneNoise, LmConfig,
    LmError, LmState, ModelParams, ParamVars,
};
use crate::noising::{Granularity, NoiseError, NoiseKind, NoiseScheme};
use crate::numeric::checkpoint::{CheckpointError, TensorArchive};
use crate::numeric::{RmsProp, RmsPropConfig, Scalar, Tape, Tensor};
use crate::par::{map_indexed, Execution};
use crate::rng::SeedTree;
use crate::variational::{
    dropout_mask, mean_tables, CombinedSampler, KlPenalty, KlWeighting, PredictMode, VariationalConfig,
    VariationalError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged in epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize, report: Box<RunReport> },
}

/// Everything a run needs. Serialized as a flat TOML table; unknown keys
/// are rejected and `seed` is mandatory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Training text (one sentence per line). Relative paths are resolved
    /// against the config file's directory.
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub min_count: u64,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub tied: bool,
    pub init_range: f64,
    pub forget_bias: f64,

    pub scheme: NoiseKind,
    pub gamma: f64,
    pub granularity: Granularity,
    pub elementwise: bool,
    /// Variance of the Gaussian components.
    pub sigma: f64,
    pub lambda: f64,
    pub kl_weighting: KlWeighting,
    /// Element-wise dropout on input embeddings.
    pub alpha: f64,
    /// Element-wise dropout on the output embedding matrix.
    pub output_dropout: f64,
    /// Dropout on the recurrent input, one mask per window.
    pub recurrent_dropout: f64,

    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub bptt: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: Option<u64>,
    pub predict: PredictMode,
    /// Record wall-clock time in the report (breaks byte-identical reports).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_path: None,
            valid_path: None,
            test_path: None,
            min_count: 1,
            embed_dim: 64,
            hidden_dim: 64,
            layers: 2,
            tied: true,
            init_range: 0.05,
            forget_bias: 1.0,
            scheme: NoiseKind::KneserNey,
            gamma: 0.2,
            granularity: Granularity::PerSequence,
            elementwise: false,
            sigma: 0.0,
            lambda: 0.0,
            kl_weighting: KlWeighting::AsWritten,
            alpha: 0.0,
            output_dropout: 0.0,
            recurrent_dropout: 0.2,
            learning_rate: 0.003,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            clip_norm: 5.0,
            batch_size: 64,
            bptt: 35,
            epochs: 10,
            patience: 3,
            seed: None,
            predict: PredictMode::Mean,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Read a config file; relative data paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TrainError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("invalid config: "))))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_path, &mut cfg.valid_path, &mut cfg.test_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn seed(&self) -> Result<u64, TrainError> {
        self.seed.ok_or_else(|| TrainError::Config("`seed` is required".into()))
    }

    pub fn noise_scheme(&self) -> Result<NoiseScheme, TrainError> {
        Ok(NoiseScheme::new(self.scheme, self.gamma)?.with_granularity(self.granularity))
    }

    pub fn variational(&self) -> Result<VariationalConfig, TrainError> {
        let v = VariationalConfig {
            scheme: self.noise_scheme()?,
            sigma: self.sigma,
            lambda: self.lambda,
            alpha: self.alpha,
            elementwise: self.elementwise,
            kl_weighting: self.kl_weighting,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            tied: self.tied,
            init_range: self.init_range,
            forget_bias: self.forget_bias,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.seed()?;
        self.variational()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        for (name, p) in [("output_dropout", self.output_dropout), ("recurrent_dropout", self.recurrent_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1)"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_epsilon > 0.0) {
            return bad("rms_decay must be in [0, 1) and rms_epsilon positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        if self.batch_size == 0 || self.bptt == 0 || self.epochs == 0 || self.patience == 0 {
            return bad("batch_size, bptt, epochs and patience must be positive");
        }
        self.lm_config(NUM_CHECK_VOCAB).validate()?;
        Ok(())
    }

    /// Read and encode the configured data files.
    pub fn load_splits(&self) -> Result<CorpusSplits, TrainError> {
        let read = |p: &Option<PathBuf>, what: &str| -> Result<Option<String>, TrainError> {
            p.as_ref()
                .map(|p| {
                    fs::read_to_string(p)
                        .map_err(|e| TrainError::Io { path: p.display().to_string(), message: e.to_string() })
                })
                .transpose()
                .and_then(|t| match (t, what) {
                    (None, "test") => Ok(None),
                    (None, _) => Err(TrainError::Config(format!("`{what}_path` is required"))),
                    (t, _) => Ok(t),
                })
        };
        let train = read(&self.train_path, "train")?.unwrap_or_default();
        let valid = read(&self.valid_path, "valid")?.unwrap_or_default();
        let test = read(&self.test_path, "test")?;
        Ok(CorpusSplits::from_texts(&train, &valid, test.as_deref(), self.min_count)?)
    }
}

const NUM_CHECK_VOCAB: usize = 4;

/// One epoch of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy (without the penalty).
    pub train_loss: f64,
    pub dev_perplexity: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub vocab_size: usize,
    pub param_count: usize,
    pub train_tokens: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_perplexity: f64,
    pub test_perplexity: Option<f64>,
    pub unigram_dev_perplexity: f64,
    pub unigram_test_perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_secs: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The report and the dev-selected parameters.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub params: ModelParams,
}

/// Split a stream into `lanes` contiguous lanes of equal length.
pub fn batchify(stream: &TokenStream, lanes: usize) -> Vec<Vec<WordId>> {
    let len = stream.len() / lanes.max(1);
    (0..lanes).map(|b| stream.ids[b * len..(b + 1) * len].to_vec()).collect()
}

/// Consecutive BPTT windows over batchified lanes.
pub fn windows(lanes: &[Vec<WordId>], bptt: usize) -> Vec<Batch> {
    let len = lanes.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < len {
        let steps = bptt.min(len - 1 - start);
        out.push(Batch {
            inputs: lanes.iter().map(|l| l[start..start + steps].to_vec()).collect(),
            targets: lanes.iter().map(|l| l[start + 1..start + steps + 1].to_vec()).collect(),
        });
        start += steps;
    }
    out
}

/// Add-one unigram perplexity of `stream` under training counts.
pub fn unigram_baseline_perplexity(stats: &CorpusStats, stream: &TokenStream) -> f64 {
    let v = stats.vocab_size() as f64;
    let n: u64 = stats.count.iter().sum();
    if stream.is_empty() {
        return f64::NAN;
    }
    let nll: f64 = stream
        .ids
        .iter()
        .map(|&w| -((stats.count[w as usize] as f64 + 1.0) / (n as f64 + v)).ln())
        .sum();
    (nll / stream.len() as f64).exp()
}

/// What evaluation needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct EvalSetup<'a> {
    pub scheme: &'a NoiseScheme,
    pub stats: &'a CorpusStats,
    pub lanes: usize,
    pub bptt: usize,
    pub seed: u64,
    pub exec: Execution,
}

/// Per-token target probabilities over the windows, optionally noised.
fn stream_probs(
    params: &ModelParams,
    tables: Option<&(Tensor, Tensor)>,
    batches: &[Batch],
    sampler: Option<(&CombinedSampler, SeedTree)>,
) -> Result<Vec<f64>, LmError> {
    let mut state = LmState::zeros(&params.config, batches.first().map_or(1, Batch::lanes));
    let mut probs = Vec::new();
    for (w, batch) in batches.iter().enumerate() {
        let noise = sampler.map(|(s, seeds)| BatchNoise {
            lanes: (0..batch.lanes())
                .map(|b| {
                    let mut rng = seeds.path(&[w as u64, b as u64]).rng();
                    s.lane_noise(&batch.inputs[b], &batch.targets[b], true, &mut rng).compact(&batch.inputs[b])
                })
                .collect(),
            recurrent_keep: None,
        });
        let mut tape = Tape::new();
        let vars = match tables {
            Some((i, o)) => ParamVars::register_with(&mut tape, params, Some(i), Some(o)),
            None => ParamVars::register(&mut tape, params),
        };
        let out = forward(&mut tape, &vars, &params.config, batch, &state, noise.as_ref())?;
        probs.extend(target_log_probs(&tape, &out, batch).into_iter().map(f64::exp));
        state = out.state;
    }
    Ok(probs)
}

/// Perplexity of `stream` under `mode`.
///
/// `mode` uses the trained rows, `mean` the variational means, `sample:S`
/// averages target probabilities over `S` noised passes (smoothing only,
/// no dropout) and `sample-log:S` averages their logarithms instead.
pub fn evaluate(
    params: &ModelParams,
    setup: &EvalSetup<'_>,
    stream: &TokenStream,
    mode: PredictMode,
) -> Result<f64, TrainError> {
    let lanes = setup.lanes.min(stream.len() / 2).max(1);
    let batches = windows(&batchify(stream, lanes), setup.bptt);
    if batches.is_empty() {
        return Err(TrainError::Config("evaluation split is too short".into()));
    }
    let probs = match mode {
        PredictMode::Mode => stream_probs(params, None, &batches, None)?,
        PredictMode::Mean => {
            let tables = mean_tables(params, setup.scheme, setup.stats);
            stream_probs(params, Some(&tables), &batches, None)?
        }
        PredictMode::SampleAvg(s) | PredictMode::SampleLogAvg(s) => {
            let cfg = VariationalConfig::new(*setup.scheme);
            let sampler = CombinedSampler::new(&cfg, setup.stats, params.config.embed_dim);
            let root = SeedTree::new(setup.seed);
            let runs = map_indexed(s, setup.exec, |i| {
                stream_probs(params, None, &batches, Some((&sampler, root.child(i as u64))))
            });
            let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
            let n = runs[0].len();
            let k = s as f64;
            if matches!(mode, PredictMode::SampleAvg(_)) {
                (0..n).map(|t| runs.iter().map(|r| r[t]).sum::<f64>() / k).collect()
            } else {
                // geometric mean of the per-sample probabilities
                (0..n).map(|t| (runs.iter().map(|r| r[t].ln()).sum::<f64>() / k).exp()).collect()
            }
        }
    };
    let nll: f64 = probs.iter().map(|p| -p.ln()).sum::<f64>() / probs.len() as f64;
    Ok(nll.exp())
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g.sum_sq() as f64).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as Scalar;
        for g in grads {
            g.scale_assign(k);
        }
    }
}

/// Train on `splits` and select the parameters with the best dev perplexity.
pub fn train(config: &TrainConfig, splits: &CorpusSplits) -> Result<TrainOutcome, TrainError> {
    train_with(config, splits, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F>(config: &TrainConfig, splits: &CorpusSplits, mut on_epoch: F) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochRecord),
{
    config.validate()?;
    let started = Instant::now();
    let seeds = SeedTree::new(config.seed()?);
    let vcfg = config.variational()?;
    let lm_cfg = config.lm_config(splits.vocab.len());
    lm_cfg.validate()?;
    let mut params = ModelParams::init(lm_cfg, &mut seeds.child(0).rng())?;

    let lanes = batchify(&splits.train, config.batch_size);
    let batches = windows(&lanes, config.bptt);
    if batches.is_empty() {
        return Err(TrainError::Config(format!(
            "training split ({} tokens) is too short for batch_size {}",
            splits.train.len(),
            config.batch_size
        )));
    }
    let sampler = CombinedSampler::new(&vcfg, &splits.stats, lm_cfg.embed_dim);
    let penalty = KlPenalty::new(&vcfg, &splits.stats, lm_cfg.tied, 1.0 / splits.train.len() as f64);
    let mut opt = RmsProp::new(RmsPropConfig {
        learning_rate: config.learning_rate,
        decay: config.rms_decay,
        epsilon: config.rms_epsilon,
    });
    let setup = EvalSetup {
        scheme: &vcfg.scheme,
        stats: &splits.stats,
        lanes: config.batch_size,
        bptt: config.bptt,
        seed: seeds.child(2).seed(),
        exec: Execution::default(),
    };

    let mut report = RunReport {
        config: config.clone(),
        vocab_size: lm_cfg.vocab_size,
        param_count: param_count(&lm_cfg)?,
        train_tokens: splits.train.len(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_perplexity: f64::INFINITY,
        test_perplexity: None,
        unigram_dev_perplexity: unigram_baseline_perplexity(&splits.stats, &splits.valid),
        unigram_test_perplexity: splits.test.as_ref().map(|t| unigram_baseline_perplexity(&splits.stats, t)),
        wall_time_secs: None,
    };
    let mut best = params.clone();
    let mut stale = 0;
    let noise_seeds = seeds.child(1);
    let out_keep = (1.0 / (1.0 - config.output_dropout)) as Scalar;

    for epoch in 1..=config.epochs {
        let mut state = LmState::zeros(&lm_cfg, config.batch_size);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for (w, batch) in batches.iter().enumerate() {
            let window_seeds = noise_seeds.path(&[epoch as u64, w as u64]);
            let noise = BatchNoise {
                lanes: (0..batch.lanes())
                    .map(|b| {
                        let mut rng = window_seeds.child(b as u64).rng();
                        let mut lane = sampler
                            .lane_noise(&batch.inputs[b], &batch.targets[b], true, &mut rng)
                            .compact(&batch.inputs[b]);
                        if config.output_dropout > 0.0 {
                            lane.output_keep = Some(dropout_mask(
                                lm_cfg.vocab_size,
                                lm_cfg.hidden_dim,
                                config.output_dropout,
                                out_keep,
                                &mut rng,
                            ));
                        }
                        lane
                    })
                    .collect(),
                recurrent_keep: (config.recurrent_dropout > 0.0).then(|| {
                    let mut rng = window_seeds.child(batch.lanes() as u64).rng();
                    recurrent_masks(&lm_cfg, batch.lanes(), config.recurrent_dropout, &mut rng)
                }),
            };
            let (loss, mut grads, next) =
                loss_and_grads(&params, batch, &state, Some(&noise), |tape, vars| penalty.apply(tape, vars))?;
            let ce = loss as f64 - penalty.value(&params) as f64;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                report.wall_time_secs = config.record_wall_time.then(|| started.elapsed().as_secs_f64());
                return Err(TrainError::Diverged { epoch, report: Box::new(report) });
            }
            let n = batch.lanes() * batch.steps();
            total += ce * n as f64;
            tokens += n;
            clip_gradients(&mut grads, config.clip_norm);
            opt.step(&mut params.tensors_mut(), &grads);
            state = next;
        }

        let dev = evaluate(&params, &setup, &splits.valid, config.predict)?;
        if !dev.is_finite() {
            report.wall_time_secs = config.record_wall_time.then(|| started.elapsed().as_secs_f64());
            return Err(TrainError::Diverged { epoch, report: Box::new(report) });
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / tokens as f64,
            dev_perplexity: dev,
            learning_rate: opt.config.learning_rate,
        };
        on_epoch(&record);
        report.epochs.push(record);
        if dev < report.best_dev_perplexity {
            report.best_dev_perplexity = dev;
            report.best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
            opt.set_learning_rate(opt.config.learning_rate / 2.0);
        }
    }

    if let Some(test) = &splits.test {
        let setup = EvalSetup { seed: seeds.child(3).seed(), ..setup };
        report.test_perplexity = Some(evaluate(&best, &setup, test, config.predict)?);
    }
    report.wall_time_secs = config.record_wall_time.then(|| started.elapsed().as_secs_f64());
    Ok(TrainOutcome { report, params: best })
}

/// Train one model per γ and return `(γ, best dev perplexity)` sorted by γ.
pub fn sweep_gamma(
    config: &TrainConfig,
    splits: &CorpusSplits,
    values: &[f64],
    exec: Execution,
) -> Result<Vec<(f64, f64)>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::Config("no gamma values given".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(TrainError::Config(format!("gamma values must lie in (0, 1), got {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let results = map_indexed(sorted.len(), exec, |i| {
        let cfg = TrainConfig { gamma: sorted[i], ..config.clone() };
        train(&cfg, splits).map(|o| (sorted[i], o.report.best_dev_perplexity))
    });
    results.into_iter().collect()
}

/// `gamma<TAB>dev_ppl` rows with a header.
pub fn sweep_tsv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("gamma\tdev_ppl\n");
    for (g, p) in rows {
        out.push_str(&format!("{g}\t{p:.6}\n"));
    }
    out
}

/// A trained model with the vocabulary and statistics it depends on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub stats: CorpusStats,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    vocab: Vec<String>,
    count: Vec<u64>,
    distinct_after: Vec<u64>,
    distinct_before: Vec<u64>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> TensorArchive {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            count: self.stats.count.clone(),
            distinct_after: self.stats.distinct_after.clone(),
            distinct_before: self.stats.distinct_before.clone(),
        };
        self.params.to_archive(serde_json::to_value(meta).expect("metadata serializes"))
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self, TrainError> {
        let meta: CheckpointMeta =
            serde_json::from_value(archive.metadata.clone()).map_err(CheckpointError::Json)?;
        let vocab = Vocabulary::from_tokens(meta.vocab)?;
        if [meta.count.len(), meta.distinct_after.len(), meta.distinct_before.len()].iter().any(|&n| n != vocab.len()) {
            return Err(TrainError::Config("checkpoint statistics do not match its vocabulary".into()));
        }
        let stats = CorpusStats::from_counts(meta.count, meta.distinct_after, meta.distinct_before);
        let params = ModelParams::from_archive(meta.config.lm_config(vocab.len()), archive)?;
        Ok(Checkpoint { config: meta.config, vocab, stats, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_archive(&TensorArchive::load(path)?)
    }

    /// Perplexity of `text` encoded with the checkpoint's vocabulary.
    pub fn evaluate_text(&self, text: &str, mode: PredictMode, seed: u64) -> Result<f64, TrainError> {
        let stream = TokenStream::encode(text, &self.vocab);
        if stream.len() < 2 {
            return Err(TrainError::Corpus(CorpusError::EmptyInput));
        }
        let scheme = self.config.noise_scheme()?;
        let setup = EvalSetup {
            scheme: &scheme,
            stats: &self.stats,
            lanes: self.config.batch_size,
            bptt: self.config.bptt,
            seed,
            exec: Execution::default(),
        };
        evaluate(&self.params, &setup, &stream, mode)
    }
}

impl LaneNoise {
    /// Drop input rows that are plain lookups of `seq`.
    pub fn compact(mut self, seq: &[WordId]) -> Self {
        let plain = self
            .inputs
            .iter()
            .zip(seq)
            .all(|(rs, &w)| rs.scale.is_none() && rs.offset.is_none() && rs.sources.iter().all(|&s| s == w));
        if plain {
            self.inputs.clear();
        }
        self
    }
}
