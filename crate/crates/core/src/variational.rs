//! Variational smoothing over embedding rows.
//!
//! The variational distribution of row `i` is a mixture: with probability
//! `1 − γ_i` the row itself, with probability `γ_i·𝒯_v` row `v`, each
//! component a Gaussian of variance `σ`. Dropout adds a zero component of
//! weight `α`. This module supplies the KL-derived L2 coefficients, the
//! mean embeddings used at prediction time and the training-time sampler.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStats, WordId};
use crate::lm::{LaneNoise, LmError, ModelParams, ParamVars, RowSource};
use crate::noising::{gammas, proposal, Granularity, NoiseKind, NoiseScheme, Noiser};
use crate::numeric::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum VariationalError {
    #[error("sigma must be a finite non-negative variance, got {0}")]
    Sigma(f64),
    #[error("dropout probability must be in [0, 1), got {0}")]
    Alpha(f64),
    #[error("lambda must be finite and non-negative, got {0}")]
    Lambda(f64),
    #[error("unknown KL weighting `{0}` (expected as_written or proposal_weighted)")]
    UnknownWeighting(String),
    #[error("invalid predict mode `{0}` (expected mode, mean, sample:S or sample-log:S with S >= 1)")]
    PredictMode(String),
}

/// How the aggregate replacement mass enters the KL coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    /// `(V − 1)·γ_i`
    #[default]
    AsWritten,
    /// `Σ_{j≠i} γ_j·𝒯_i`
    ProposalWeighted,
}

impl FromStr for KlWeighting {
    type Err = VariationalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_written" => Ok(KlWeighting::AsWritten),
            "proposal_weighted" => Ok(KlWeighting::ProposalWeighted),
            _ => Err(VariationalError::UnknownWeighting(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationalConfig {
    pub scheme: NoiseScheme,
    /// Variance of each Gaussian component.
    pub sigma: f64,
    pub lambda: f64,
    /// Embedding dropout probability.
    pub alpha: f64,
    pub elementwise: bool,
    pub kl_weighting: KlWeighting,
}

impl VariationalConfig {
    pub fn new(scheme: NoiseScheme) -> Self {
        VariationalConfig {
            scheme,
            sigma: 0.0,
            lambda: 0.0,
            alpha: 0.0,
            elementwise: false,
            kl_weighting: KlWeighting::AsWritten,
        }
    }

    pub fn validate(&self) -> Result<(), VariationalError> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(VariationalError::Sigma(self.sigma));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(VariationalError::Alpha(self.alpha));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(VariationalError::Lambda(self.lambda));
        }
        Ok(())
    }
}

/// Per-word coefficient on `‖e_i‖²` from the KL term (constants dropped).
pub fn kl_l2_coefficients(cfg: &VariationalConfig, stats: &CorpusStats) -> Vec<f64> {
    let v = stats.vocab_size();
    let g = gammas(&cfg.scheme, stats);
    let t = proposal(&cfg.scheme, stats);
    let total_rate: f64 = g.iter().sum();
    (0..v)
        .map(|i| {
            let aggregate = match cfg.kl_weighting {
                KlWeighting::AsWritten => (v as f64 - 1.0) * g[i],
                KlWeighting::ProposalWeighted => (total_rate - g[i]) * t[i],
            };
            cfg.lambda * (aggregate + (1.0 - g[i] + g[i] * t[i])) / 2.0
        })
        .collect()
}

/// Mean of the variational distribution of every row:
/// `ē_i = (1 − γ_i)·e_i + γ_i·Σ_v 𝒯_v·e_v`.
pub fn mean_embeddings(table: &Tensor, scheme: &NoiseScheme, stats: &CorpusStats) -> Tensor {
    let g = gammas(scheme, stats);
    let t = proposal(scheme, stats);
    let d = table.cols();
    let mut centroid = vec![0.0 as Scalar; d];
    for (v, &tv) in t.iter().enumerate() {
        if tv != 0.0 {
            for (c, &x) in centroid.iter_mut().zip(table.row(v)) {
                *c += tv as Scalar * x;
            }
        }
    }
    let mut out = table.clone();
    for (i, &gi) in g.iter().enumerate() {
        let gi = gi as Scalar;
        for (x, &c) in out.row_mut(i).iter_mut().zip(&centroid) {
            *x = (1.0 - gi) * *x + gi * c;
        }
    }
    out
}

/// A `rows × cols` dropout mask: `0` with probability `p`, otherwise `keep`.
pub fn dropout_mask<R: RngCore + ?Sized>(rows: usize, cols: usize, p: f64, keep: Scalar, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    Tensor::matrix(rows, cols, data).expect("mask shape")
}

/// Draws from the combined smoothing + dropout distribution.
#[derive(Debug, Clone)]
pub struct CombinedSampler {
    noiser: Noiser,
    alpha: f64,
    std_dev: Scalar,
    elementwise: bool,
    dim: usize,
}

impl CombinedSampler {
    pub fn new(cfg: &VariationalConfig, stats: &CorpusStats, dim: usize) -> Self {
        CombinedSampler {
            noiser: Noiser::new(cfg.scheme, stats),
            alpha: cfg.alpha,
            std_dev: cfg.sigma.sqrt() as Scalar,
            elementwise: cfg.elementwise,
            dim,
        }
    }

    pub fn noiser(&self) -> &Noiser {
        &self.noiser
    }

    /// Noise for one lane: input rows for `seq` and, for Kneser-Ney, the
    /// paired target-row substitutions. With `inverted`, kept elements are
    /// scaled by `1/(1−α)`; otherwise the raw mixture is drawn.
    pub fn lane_noise<R: RngCore + ?Sized>(
        &self,
        seq: &[WordId],
        targets: &[WordId],
        inverted: bool,
        rng: &mut R,
    ) -> LaneNoise {
        let d = self.dim;
        let mut inputs: Vec<RowSource>;
        let mut output_subs = Vec::new();
        let kn = self.noiser.scheme().kind.noises_output();

        if self.elementwise {
            let per_type = self.noiser.scheme().granularity == Granularity::PerSequence;
            let mut decided: BTreeMap<(WordId, usize), Option<WordId>> = BTreeMap::new();
            inputs = Vec::with_capacity(seq.len());
            for (t, &w) in seq.iter().enumerate() {
                let mut sources = Vec::with_capacity(d);
                let mut out: Option<Vec<WordId>> = None;
                for j in 0..d {
                    let r = if per_type {
                        *decided.entry((w, j)).or_insert_with(|| self.noiser.draw(w, rng))
                    } else {
                        self.noiser.draw(w, rng)
                    };
                    sources.push(r.unwrap_or(w));
                    if r.is_some() && kn {
                        let target = targets[t];
                        let row = out.get_or_insert_with(|| vec![target; d]);
                        row[j] = self.noiser.draw_proposal(rng);
                    }
                }
                if let Some(row) = out {
                    output_subs.push((t, row));
                }
                inputs.push(RowSource { sources, scale: None, offset: None });
            }
        } else {
            let plan = self.noiser.sample_plan(seq, rng);
            inputs = seq
                .iter()
                .enumerate()
                .map(|(t, &w)| RowSource::word(plan.input_at(t, w).unwrap_or(w)))
                .collect();
            output_subs = plan.output_subs.iter().map(|(&t, &r)| (t, vec![r])).collect();
        }

        if self.alpha > 0.0 {
            let keep = if inverted { (1.0 / (1.0 - self.alpha)) as Scalar } else { 1.0 };
            for rs in &mut inputs {
                rs.scale = Some((0..d).map(|_| if rng.random::<f64>() < self.alpha { 0.0 } else { keep }).collect());
            }
        }
        if self.std_dev > 0.0 {
            for rs in &mut inputs {
                rs.offset = Some(
                    (0..d)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            self.std_dev * z as Scalar
                        })
                        .collect(),
                );
            }
        }
        LaneNoise { inputs, output_subs, output_keep: None }
    }
}

/// Sampled embedding rows (`len(seq) × d`) from the raw combined
/// distribution; its expectation for word `i` is `(1 − α)·ē_i`.
pub fn sample_combined<R: RngCore + ?Sized>(
    table: &Tensor,
    cfg: &VariationalConfig,
    stats: &CorpusStats,
    seq: &[WordId],
    rng: &mut R,
) -> Tensor {
    let sampler = CombinedSampler::new(cfg, stats, table.cols());
    let noise = sampler.lane_noise(seq, seq, false, rng);
    let rows: Vec<Vec<Scalar>> = noise.inputs.iter().map(|rs| rs.materialize(table)).collect();
    Tensor::matrix(seq.len(), table.cols(), rows.concat()).expect("row count")
}

/// KL-derived L2 penalty on the embedding tables plus plain L2 on LSTM weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KlPenalty {
    /// Coefficients for the input table (including output terms when tied).
    pub input: Vec<Scalar>,
    /// Coefficients for an untied output table.
    pub output: Option<Vec<Scalar>>,
    pub lstm: Scalar,
    /// Multiplier on the whole penalty, e.g. `1 / training tokens`.
    pub scale: Scalar,
}

impl KlPenalty {
    pub fn new(cfg: &VariationalConfig, stats: &CorpusStats, tied: bool, scale: f64) -> Self {
        let coefs = kl_l2_coefficients(cfg, stats);
        let plain = cfg.lambda / 2.0;
        let output: Vec<f64> = if cfg.scheme.kind.noises_output() {
            coefs.clone()
        } else {
            vec![plain; coefs.len()]
        };
        let to_scalar = |v: Vec<f64>| v.into_iter().map(|x| x as Scalar).collect::<Vec<_>>();
        let (input, output) = if tied {
            (to_scalar(coefs.iter().zip(&output).map(|(a, b)| a + b).collect()), None)
        } else {
            (to_scalar(coefs), Some(to_scalar(output)))
        };
        KlPenalty { input, output, lstm: plain as Scalar, scale: scale as Scalar }
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0 || (self.lstm == 0.0 && self.input.iter().chain(self.output.iter().flatten()).all(|&c| c == 0.0))
    }

    /// Add the penalty to the tape; `None` when it is identically zero.
    pub fn apply(&self, tape: &mut Tape, vars: &ParamVars) -> Result<Option<Var>, LmError> {
        if self.is_zero() {
            return Ok(None);
        }
        let mut parts = vec![tape.weighted_row_sq_sum(vars.input_table, self.input.clone())?];
        if let Some(out) = &self.output {
            parts.push(tape.weighted_row_sq_sum(vars.output_table, out.clone())?);
        }
        if self.lstm != 0.0 {
            for [w_in, w_hid, _] in &vars.layers {
                let a = tape.sum_sq(*w_in);
                let b = tape.sum_sq(*w_hid);
                parts.push(tape.scale(a, self.lstm));
                parts.push(tape.scale(b, self.lstm));
            }
        }
        let total = tape.sum(&parts)?;
        Ok(Some(tape.scale(total, self.scale)))
    }

    /// The penalty's value for `params`, without a tape.
    pub fn value(&self, params: &ModelParams) -> Scalar {
        let rows = |t: &Tensor, c: &[Scalar]| -> Scalar {
            c.iter().enumerate().map(|(i, &k)| k * t.row(i).iter().map(|x| x * x).sum::<Scalar>()).sum()
        };
        let mut total = rows(&params.embedding, &self.input);
        if let (Some(c), Some(o)) = (&self.output, &params.output) {
            total += rows(o, c);
        }
        for layer in &params.layers {
            total += self.lstm * (layer.w_input.sum_sq() + layer.w_hidden.sum_sq());
        }
        total * self.scale
    }
}

/// Which embeddings to use when predicting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictMode {
    /// The trained rows as they are.
    Mode,
    /// The variational means.
    #[default]
    Mean,
    /// Average predictive probabilities over `S` sampled plans.
    SampleAvg(usize),
    /// Average log-probabilities over `S` sampled plans.
    SampleLogAvg(usize),
}

impl FromStr for PredictMode {
    type Err = VariationalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mode" => Ok(PredictMode::Mode),
            "mean" => Ok(PredictMode::Mean),
            _ => {
                let count = |n: &str| n.parse::<usize>().ok().filter(|&n| n >= 1);
                s.strip_prefix("sample:")
                    .and_then(count)
                    .map(PredictMode::SampleAvg)
                    .or_else(|| s.strip_prefix("sample-log:").and_then(count).map(PredictMode::SampleLogAvg))
                    .ok_or_else(|| VariationalError::PredictMode(s.to_string()))
            }
        }
    }
}

impl fmt::Display for PredictMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictMode::Mode => f.write_str("mode"),
            PredictMode::Mean => f.write_str("mean"),
            PredictMode::SampleAvg(s) => write!(f, "sample:{s}"),
            PredictMode::SampleLogAvg(s) => write!(f, "sample-log:{s}"),
        }
    }
}

impl Serialize for PredictMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PredictMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Input and output tables for mean prediction. The output side is only
/// smoothed for Kneser-Ney; a tied model otherwise keeps the raw rows there.
pub fn mean_tables(params: &ModelParams, scheme: &NoiseScheme, stats: &CorpusStats) -> (Tensor, Tensor) {
    let input = mean_embeddings(&params.embedding, scheme, stats);
    let output = if scheme.kind == NoiseKind::KneserNey {
        mean_embeddings(params.output_table(), scheme, stats)
    } else {
        params.output_table().clone()
    };
    (input, output)
}
