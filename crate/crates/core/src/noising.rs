//! Word-replacement noising schemes.
//!
//! | scheme                | per-word rate γ_i                | proposal 𝒯        | noised        |
//! |-----------------------|----------------------------------|-------------------|---------------|
//! | blank                 | γ                                | point mass on `_` | input         |
//! | linear interpolation  | γ                                | unigram U         | input         |
//! | absolute discounting  | γ·distinct(i,·)/count(i)         | unigram U         | input         |
//! | Kneser-Ney            | γ·distinct(i,·)/count(i)         | continuation K    | input, output |
//!
//! A replacement is a two-stage draw: with probability γ_i the word is
//! replaced by a sample from 𝒯, which may return the word itself. The
//! resulting marginal is the mixture in [`MixtureWeights`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand::RngCore;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStats, TokenStream, Vocabulary, WordId, BLANK};
use crate::par::{map_indexed, Execution};
use crate::rng::{Rng, SeedTree};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("unknown noising scheme {0:?} (expected blank, interp, absdisc or kn)")]
    UnknownScheme(String),
    #[error("unknown granularity {0:?} (expected per_sequence or per_timestep)")]
    UnknownGranularity(String),
    #[error("gamma must lie in [0, 1], got {0}")]
    GammaOutOfRange(f64),
    #[error("at least one Monte Carlo trial is required")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Blank,
    #[serde(alias = "interp")]
    LinearInterpolation,
    #[serde(alias = "absdisc")]
    AbsoluteDiscounting,
    #[serde(alias = "kn")]
    KneserNey,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::Blank,
        NoiseKind::LinearInterpolation,
        NoiseKind::AbsoluteDiscounting,
        NoiseKind::KneserNey,
    ];

    /// Whether the target word is noised along with the input.
    pub fn noises_output(self) -> bool {
        self == NoiseKind::KneserNey
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Blank => "blank",
            NoiseKind::LinearInterpolation => "linear_interpolation",
            NoiseKind::AbsoluteDiscounting => "absolute_discounting",
            NoiseKind::KneserNey => "kneser_ney",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blank" => Ok(NoiseKind::Blank),
            "interp" | "linear_interpolation" => Ok(NoiseKind::LinearInterpolation),
            "absdisc" | "absolute_discounting" => Ok(NoiseKind::AbsoluteDiscounting),
            "kn" | "kneser_ney" => Ok(NoiseKind::KneserNey),
            other => Err(NoiseError::UnknownScheme(other.to_string())),
        }
    }
}

/// Whether replacement decisions are made once per word type in a sequence
/// or independently at every position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerSequence,
    PerTimestep,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerSequence => "per_sequence",
            Granularity::PerTimestep => "per_timestep",
        })
    }
}

impl FromStr for Granularity {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_sequence" | "sequence" => Ok(Granularity::PerSequence),
            "per_timestep" | "timestep" => Ok(Granularity::PerTimestep),
            other => Err(NoiseError::UnknownGranularity(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScheme {
    pub kind: NoiseKind,
    pub gamma: f64,
    pub granularity: Granularity,
}

impl NoiseScheme {
    pub fn new(kind: NoiseKind, gamma: f64) -> Result<Self, NoiseError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(NoiseError::GammaOutOfRange(gamma));
        }
        Ok(NoiseScheme { kind, gamma, granularity: Granularity::PerSequence })
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }
}

/// The proposal distribution 𝒯 over the vocabulary.
pub fn proposal(scheme: &NoiseScheme, stats: &CorpusStats) -> Vec<f64> {
    match scheme.kind {
        NoiseKind::Blank => {
            let mut t = vec![0.0; stats.vocab_size()];
            t[BLANK as usize] = 1.0;
            t
        }
        NoiseKind::LinearInterpolation | NoiseKind::AbsoluteDiscounting => stats.unigram.clone(),
        NoiseKind::KneserNey => stats.continuation.clone(),
    }
}

/// Per-word replacement probability γ_i. Words that never occur get 0.
pub fn gamma_for(scheme: &NoiseScheme, stats: &CorpusStats, word: WordId) -> f64 {
    let w = word as usize;
    let count = stats.count[w];
    if count == 0 {
        return 0.0;
    }
    match scheme.kind {
        NoiseKind::Blank | NoiseKind::LinearInterpolation => scheme.gamma,
        NoiseKind::AbsoluteDiscounting | NoiseKind::KneserNey => {
            scheme.gamma * (stats.distinct_after[w] as f64 / count as f64)
        }
    }
}

/// γ_i for every word.
pub fn gammas(scheme: &NoiseScheme, stats: &CorpusStats) -> Vec<f64> {
    (0..stats.vocab_size() as WordId).map(|w| gamma_for(scheme, stats, w)).collect()
}

/// Mixture proportions of the noised distribution of one word.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights {
    pub word: WordId,
    /// 1 − γ_i + γ_i·𝒯_i
    pub keep: f64,
    /// γ_i·𝒯_v for v ≠ i; the entry at `word` is 0.
    pub replace: Vec<f64>,
}

impl MixtureWeights {
    pub fn total(&self) -> f64 {
        self.keep + self.replace.iter().sum::<f64>()
    }

    /// Probability that the noised word is `v`.
    pub fn prob(&self, v: WordId) -> f64 {
        if v == self.word {
            self.keep
        } else {
            self.replace[v as usize]
        }
    }
}

pub fn mixture_weights(scheme: &NoiseScheme, stats: &CorpusStats, word: WordId) -> MixtureWeights {
    let t = proposal(scheme, stats);
    let g = gamma_for(scheme, stats, word);
    let mut replace: Vec<f64> = t.iter().map(|&p| g * p).collect();
    replace[word as usize] = 0.0;
    MixtureWeights { word, keep: 1.0 - g + g * t[word as usize], replace }
}

/// Replacement decisions for the inputs of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputSubs {
    /// Word type → replacement, shared by every occurrence.
    ByType(BTreeMap<WordId, WordId>),
    /// Position → replacement.
    ByPosition(BTreeMap<usize, WordId>),
}

/// One Monte Carlo draw of the noised sequence.
///
/// An entry exists whenever the replace branch fired, even if the proposal
/// returned the original word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplacementPlan {
    pub input_subs: InputSubs,
    /// Position `t` → sampled output row for the target predicted at `t`.
    /// Only populated for Kneser-Ney, exactly at replaced input positions.
    pub output_subs: BTreeMap<usize, WordId>,
}

impl ReplacementPlan {
    pub fn empty(granularity: Granularity) -> Self {
        let input_subs = match granularity {
            Granularity::PerSequence => InputSubs::ByType(BTreeMap::new()),
            Granularity::PerTimestep => InputSubs::ByPosition(BTreeMap::new()),
        };
        ReplacementPlan { input_subs, output_subs: BTreeMap::new() }
    }

    pub fn is_empty(&self) -> bool {
        let inputs_empty = match &self.input_subs {
            InputSubs::ByType(m) => m.is_empty(),
            InputSubs::ByPosition(m) => m.is_empty(),
        };
        inputs_empty && self.output_subs.is_empty()
    }

    /// Replacement for `word` at `pos`, if that input was replaced.
    pub fn input_at(&self, pos: usize, word: WordId) -> Option<WordId> {
        match &self.input_subs {
            InputSubs::ByType(m) => m.get(&word).copied(),
            InputSubs::ByPosition(m) => m.get(&pos).copied(),
        }
    }

    /// The noised input sequence.
    pub fn apply(&self, seq: &[WordId]) -> Vec<WordId> {
        seq.iter().enumerate().map(|(t, &w)| self.input_at(t, w).unwrap_or(w)).collect()
    }

    /// Positions whose input was replaced.
    pub fn replaced_positions(&self, seq: &[WordId]) -> Vec<usize> {
        (0..seq.len()).filter(|&t| self.input_at(t, seq[t]).is_some()).collect()
    }
}

/// Precomputed rates and an alias table for repeated sampling.
#[derive(Debug, Clone)]
pub struct Noiser {
    scheme: NoiseScheme,
    gammas: Vec<f64>,
    proposal: Vec<f64>,
    table: Option<WeightedAliasIndex<f64>>,
}

impl Noiser {
    pub fn new(scheme: NoiseScheme, stats: &CorpusStats) -> Self {
        let proposal = proposal(&scheme, stats);
        let gammas = gammas(&scheme, stats);
        let table = if gammas.iter().any(|&g| g > 0.0) {
            Some(WeightedAliasIndex::new(proposal.clone()).expect("proposal has positive mass"))
        } else {
            None
        };
        Noiser { scheme, gammas, proposal, table }
    }

    pub fn scheme(&self) -> &NoiseScheme {
        &self.scheme
    }

    pub fn gamma(&self, word: WordId) -> f64 {
        self.gammas[word as usize]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn proposal(&self) -> &[f64] {
        &self.proposal
    }

    /// Bernoulli(γ_word): whether the replace branch fires.
    pub fn decide<R: RngCore + ?Sized>(&self, word: WordId, rng: &mut R) -> bool {
        let g = self.gammas[word as usize];
        g > 0.0 && rng.random::<f64>() < g
    }

    /// A draw from 𝒯.
    pub fn draw_proposal<R: RngCore + ?Sized>(&self, rng: &mut R) -> WordId {
        match &self.table {
            Some(t) => t.sample(rng) as WordId,
            None => BLANK,
        }
    }

    /// Replacement for `word`, or `None` when kept.
    pub fn draw<R: RngCore + ?Sized>(&self, word: WordId, rng: &mut R) -> Option<WordId> {
        self.decide(word, rng).then(|| self.draw_proposal(rng))
    }

    /// Noised word (original or replacement).
    pub fn noised<R: RngCore + ?Sized>(&self, word: WordId, rng: &mut R) -> WordId {
        self.draw(word, rng).unwrap_or(word)
    }

    pub fn sample_plan<R: RngCore + ?Sized>(&self, seq: &[WordId], rng: &mut R) -> ReplacementPlan {
        let mut plan = ReplacementPlan::empty(self.scheme.granularity);
        match &mut plan.input_subs {
            InputSubs::ByType(m) => {
                let mut decided = BTreeSet::new();
                for &w in seq {
                    if !decided.insert(w) {
                        continue;
                    }
                    if let Some(r) = self.draw(w, rng) {
                        m.insert(w, r);
                    }
                }
            }
            InputSubs::ByPosition(m) => {
                for (t, &w) in seq.iter().enumerate() {
                    if let Some(r) = self.draw(w, rng) {
                        m.insert(t, r);
                    }
                }
            }
        }
        if self.scheme.kind.noises_output() {
            for t in plan.replaced_positions(seq) {
                let out = self.draw_proposal(rng);
                plan.output_subs.insert(t, out);
            }
        }
        plan
    }
}

/// Draw one replacement plan for `seq`.
pub fn sample_plan<R: RngCore + ?Sized>(
    scheme: &NoiseScheme,
    stats: &CorpusStats,
    seq: &[WordId],
    rng: &mut R,
) -> ReplacementPlan {
    Noiser::new(*scheme, stats).sample_plan(seq, rng)
}

fn occurrences(stats_size: usize, stream: &TokenStream) -> Vec<u64> {
    let mut c = vec![0u64; stats_size];
    for &w in &stream.ids {
        c[w as usize] += 1;
    }
    c
}

/// Expected unigram counts of the noised stream.
pub fn expected_pseudocounts(scheme: &NoiseScheme, stats: &CorpusStats, stream: &TokenStream) -> Vec<f64> {
    let t = proposal(scheme, stats);
    let g = gammas(scheme, stats);
    let occ = occurrences(stats.vocab_size(), stream);
    // Total replacement mass leaving all positions.
    let outflow: f64 = occ.iter().zip(&g).map(|(&c, &gi)| c as f64 * gi).sum();
    (0..stats.vocab_size())
        .map(|v| {
            let c = occ[v] as f64;
            let keep = 1.0 - g[v] + g[v] * t[v];
            c * keep + t[v] * (outflow - c * g[v])
        })
        .collect()
}

/// Empirical noised unigram counts with their standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudocountEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub trials: usize,
}

const TRIALS_PER_CHUNK: usize = 1024;

/// Monte Carlo estimate of the noised unigram counts (per-timestep draws).
///
/// Trials are split into fixed-size chunks with seeds derived from one draw
/// of `rng`, so the result does not depend on the number of threads.
pub fn monte_carlo_pseudocounts(
    scheme: &NoiseScheme,
    stats: &CorpusStats,
    stream: &TokenStream,
    trials: usize,
    rng: &mut Rng,
) -> Result<PseudocountEstimate, NoiseError> {
    let root = SeedTree::new(rng.next_u64());
    monte_carlo_pseudocounts_with(scheme, stats, stream, trials, root, Execution::default())
}

pub fn monte_carlo_pseudocounts_with(
    scheme: &NoiseScheme,
    stats: &CorpusStats,
    stream: &TokenStream,
    trials: usize,
    seeds: SeedTree,
    exec: Execution,
) -> Result<PseudocountEstimate, NoiseError> {
    if trials == 0 {
        return Err(NoiseError::NoTrials);
    }
    let v = stats.vocab_size();
    let noiser = Noiser::new(scheme.with_granularity(Granularity::PerTimestep), stats);
    let chunks = trials.div_ceil(TRIALS_PER_CHUNK);
    let partial = map_indexed(chunks, exec, |c| {
        let n = TRIALS_PER_CHUNK.min(trials - c * TRIALS_PER_CHUNK);
        let mut rng = seeds.child(c as u64).rng();
        let mut sum = vec![0u64; v];
        let mut sum_sq = vec![0u64; v];
        let mut counts = vec![0u64; v];
        let mut touched: Vec<usize> = Vec::new();
        for _ in 0..n {
            for &w in &stream.ids {
                let x = noiser.noised(w, &mut rng) as usize;
                if counts[x] == 0 {
                    touched.push(x);
                }
                counts[x] += 1;
            }
            for &x in &touched {
                sum[x] += counts[x];
                sum_sq[x] += counts[x] * counts[x];
                counts[x] = 0;
            }
            touched.clear();
        }
        (sum, sum_sq)
    });
    let mut sum = vec![0u64; v];
    let mut sum_sq = vec![0u64; v];
    for (s, q) in partial {
        for i in 0..v {
            sum[i] += s[i];
            sum_sq[i] += q[i];
        }
    }
    let n = trials as f64;
    let mean: Vec<f64> = sum.iter().map(|&s| s as f64 / n).collect();
    let std_error = (0..v)
        .map(|i| {
            if trials < 2 {
                return 0.0;
            }
            let var = (sum_sq[i] as f64 - n * mean[i] * mean[i]) / (n - 1.0);
            (var.max(0.0) / n).sqrt()
        })
        .collect();
    Ok(PseudocountEstimate { mean, std_error, trials })
}

/// One word's line in a [`VerifyReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCheck {
    pub word: String,
    pub analytic: f64,
    pub empirical: f64,
    pub std_error: f64,
    /// |empirical − analytic| in standard errors (0 when both are exact).
    pub z: f64,
}

/// Analytic versus Monte Carlo pseudocounts for one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub scheme: NoiseKind,
    pub gamma: f64,
    pub trials: usize,
    pub words: Vec<WordCheck>,
    pub max_relative_error: f64,
    pub max_z: f64,
}

impl VerifyReport {
    /// Every word within `z_limit` standard errors and the worst relative
    /// error below `rel_tol`.
    pub fn passes(&self, rel_tol: f64, z_limit: f64) -> bool {
        self.max_relative_error < rel_tol && self.max_z <= z_limit
    }
}

/// Compare [`expected_pseudocounts`] with [`monte_carlo_pseudocounts`].
/// Words whose analytic and empirical counts are both zero are omitted.
pub fn verify(
    scheme: &NoiseScheme,
    stats: &CorpusStats,
    vocab: &Vocabulary,
    stream: &TokenStream,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<VerifyReport, NoiseError> {
    let analytic = expected_pseudocounts(scheme, stats, stream);
    let est = monte_carlo_pseudocounts_with(scheme, stats, stream, trials, SeedTree::new(seed), exec)?;
    let mut words = Vec::new();
    let mut max_rel = 0.0f64;
    let mut max_z = 0.0f64;
    for (i, (&a, &e)) in analytic.iter().zip(&est.mean).enumerate() {
        if a == 0.0 && e == 0.0 {
            continue;
        }
        let se = est.std_error[i];
        let diff = (e - a).abs();
        let rel = if a > 0.0 { diff / a } else { f64::INFINITY };
        let z = if diff <= 1e-9 * a.max(1.0) {
            0.0
        } else if se > 0.0 {
            diff / se
        } else {
            f64::INFINITY
        };
        max_rel = max_rel.max(rel);
        max_z = max_z.max(z);
        words.push(WordCheck { word: vocab.token(i as WordId).to_string(), analytic: a, empirical: e, std_error: se, z });
    }
    Ok(VerifyReport { scheme: scheme.kind, gamma: scheme.gamma, trials, words, max_relative_error: max_rel, max_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, compute_stats, stats_for_size};
    use proptest::prelude::*;

    fn toy() -> (Vocabulary, CorpusStats, TokenStream) {
        let vocab = build_vocab(["a", "b", "a", "c"], 1).unwrap();
        let stream = TokenStream::encode("a b a c", &vocab);
        let stats = compute_stats(&stream, &vocab);
        (vocab, stats, stream)
    }

    fn scheme(kind: NoiseKind, gamma: f64) -> NoiseScheme {
        NoiseScheme::new(kind, gamma).unwrap()
    }

    const A: WordId = 3;
    const B: WordId = 4;
    const C: WordId = 5;

    #[test]
    fn proposals() {
        let (_, stats, _) = toy();
        let blank = proposal(&scheme(NoiseKind::Blank, 0.3), &stats);
        assert_eq!(blank[BLANK as usize], 1.0);
        assert_eq!(blank.iter().sum::<f64>(), 1.0);
        let interp = proposal(&scheme(NoiseKind::LinearInterpolation, 0.3), &stats);
        assert_eq!(&interp[3..], &[0.5, 0.25, 0.25]);
        let kn = proposal(&scheme(NoiseKind::KneserNey, 0.3), &stats);
        assert_eq!(&kn[3..], &[1.0 / 3.0; 3]);
    }

    #[test]
    fn per_word_rates() {
        let (_, stats, _) = toy();
        let ad = scheme(NoiseKind::AbsoluteDiscounting, 0.3);
        assert_eq!(gamma_for(&ad, &stats, A), 0.3);
        assert_eq!(gamma_for(&ad, &stats, C), 0.0);
        assert_eq!(gamma_for(&ad, &stats, B), 0.3);
        let li = scheme(NoiseKind::LinearInterpolation, 0.3);
        for w in [A, B, C] {
            assert_eq!(gamma_for(&li, &stats, w), 0.3);
        }
        // never-seen words are never noised
        assert_eq!(gamma_for(&li, &stats, BLANK), 0.0);
    }

    #[test]
    fn mixture_examples() {
        let (_, stats, _) = toy();
        let m = mixture_weights(&scheme(NoiseKind::LinearInterpolation, 0.2), &stats, A);
        assert!((m.keep - 0.9).abs() < 1e-15);
        assert!((m.prob(B) - 0.05).abs() < 1e-15);
        let m0 = mixture_weights(&scheme(NoiseKind::KneserNey, 0.0), &stats, A);
        assert_eq!(m0.keep, 1.0);
        assert!(m0.replace.iter().all(|&r| r == 0.0));
        let mc = mixture_weights(&scheme(NoiseKind::KneserNey, 0.7), &stats, C);
        assert_eq!(mc.keep, 1.0);
    }

    #[test]
    fn zero_gamma_gives_empty_plan() {
        let (_, stats, stream) = toy();
        let mut rng = SeedTree::new(1).rng();
        for kind in NoiseKind::ALL {
            let plan = sample_plan(&scheme(kind, 0.0), &stats, &stream.ids, &mut rng);
            assert!(plan.is_empty());
        }
    }

    #[test]
    fn per_sequence_plans_replace_every_occurrence() {
        let (_, stats, stream) = toy();
        let s = scheme(NoiseKind::LinearInterpolation, 0.9);
        let mut rng = SeedTree::new(5).rng();
        let mut saw_a_replaced = false;
        for _ in 0..200 {
            let plan = sample_plan(&s, &stats, &stream.ids, &mut rng);
            let noised = plan.apply(&stream.ids);
            assert_eq!(noised[0], noised[2]);
            if let Some(r) = plan.input_at(0, A) {
                saw_a_replaced = true;
                assert_eq!(plan.input_at(2, A), Some(r));
            }
            assert!(plan.output_subs.is_empty());
        }
        assert!(saw_a_replaced);
    }

    #[test]
    fn kneser_ney_output_subs_track_replaced_inputs() {
        let (_, stats, stream) = toy();
        for granularity in [Granularity::PerSequence, Granularity::PerTimestep] {
            let s = scheme(NoiseKind::KneserNey, 0.8).with_granularity(granularity);
            let mut rng = SeedTree::new(9).rng();
            for _ in 0..200 {
                let plan = sample_plan(&s, &stats, &stream.ids, &mut rng);
                let replaced = plan.replaced_positions(&stream.ids);
                let outs: Vec<usize> = plan.output_subs.keys().copied().collect();
                assert_eq!(replaced, outs);
                // c has no continuations, so it is never replaced
                assert!(!replaced.contains(&3));
            }
        }
    }

    #[test]
    fn keep_frequency_matches_mixture_weight() {
        let (_, stats, stream) = toy();
        let s = scheme(NoiseKind::LinearInterpolation, 0.2);
        let noiser = Noiser::new(s, &stats);
        let mut rng = SeedTree::new(11).rng();
        let n = 100_000;
        let kept = (0..n)
            .filter(|_| noiser.sample_plan(&stream.ids, &mut rng).apply(&stream.ids)[0] == A)
            .count();
        let keep = mixture_weights(&s, &stats, A).keep;
        assert!((kept as f64 / n as f64 - keep).abs() < 0.01);
    }

    #[test]
    fn granularities_share_single_position_marginals() {
        let (_, stats, _) = toy();
        let n = 100_000;
        let mut freq = Vec::new();
        for g in [Granularity::PerSequence, Granularity::PerTimestep] {
            let noiser = Noiser::new(scheme(NoiseKind::KneserNey, 0.6).with_granularity(g), &stats);
            let mut rng = SeedTree::new(21).rng();
            let mut hist = vec![0usize; stats.vocab_size()];
            for _ in 0..n {
                hist[noiser.sample_plan(&[A], &mut rng).apply(&[A])[0] as usize] += 1;
            }
            freq.push(hist);
        }
        let w = mixture_weights(&scheme(NoiseKind::KneserNey, 0.6), &stats, A);
        for v in 0..stats.vocab_size() {
            let p = w.prob(v as WordId);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            for hist in &freq {
                let emp = hist[v] as f64 / n as f64;
                assert!((emp - p).abs() <= 4.0 * se + 1e-12, "word {v}: {emp} vs {p}");
            }
        }
    }

    // Independent oracle: sum the mixture weights position by position.
    fn pseudocounts_by_position(s: &NoiseScheme, stats: &CorpusStats, stream: &TokenStream) -> Vec<f64> {
        let mut out = vec![0.0; stats.vocab_size()];
        for &w in &stream.ids {
            let m = mixture_weights(s, stats, w);
            for (v, o) in out.iter_mut().enumerate() {
                *o += m.prob(v as WordId);
            }
        }
        out
    }

    #[test]
    fn expected_pseudocount_examples() {
        let (_, stats, stream) = toy();
        let raw = expected_pseudocounts(&scheme(NoiseKind::KneserNey, 0.0), &stats, &stream);
        assert_eq!(&raw[3..], &[2.0, 1.0, 1.0]);
        let li = expected_pseudocounts(&scheme(NoiseKind::LinearInterpolation, 0.2), &stats, &stream);
        assert!((li[A as usize] - 2.0).abs() < 1e-12);
        let bl = expected_pseudocounts(&scheme(NoiseKind::Blank, 0.5), &stats, &stream);
        assert!((bl[BLANK as usize] - 2.0).abs() < 1e-12);
        for kind in NoiseKind::ALL {
            let s = scheme(kind, 0.35);
            let fast = expected_pseudocounts(&s, &stats, &stream);
            let slow = pseudocounts_by_position(&s, &stats, &stream);
            for (f, o) in fast.iter().zip(&slow) {
                assert!((f - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monte_carlo_matches_analytic_on_toy() {
        let (vocab, stats, stream) = toy();
        let report = verify(&scheme(NoiseKind::KneserNey, 0.3), &stats, &vocab, &stream, 100_000, 3, Execution::default())
            .unwrap();
        assert!(report.max_relative_error < 0.02, "{report:?}");
        assert!(report.max_z < 4.0, "{report:?}");
    }

    #[test]
    fn monte_carlo_is_independent_of_execution() {
        let (_, stats, stream) = toy();
        let s = scheme(NoiseKind::LinearInterpolation, 0.4);
        let a = monte_carlo_pseudocounts_with(&s, &stats, &stream, 5000, SeedTree::new(2), Execution::Sequential).unwrap();
        let b = monte_carlo_pseudocounts_with(&s, &stats, &stream, 5000, SeedTree::new(2), Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let mut rng = SeedTree::new(1).rng();
        assert_eq!(monte_carlo_pseudocounts(&s, &stats, &stream, 0, &mut rng), Err(NoiseError::NoTrials));
    }

    #[test]
    fn parsing() {
        assert_eq!("kn".parse::<NoiseKind>().unwrap(), NoiseKind::KneserNey);
        assert_eq!("kneser_ney".parse::<NoiseKind>().unwrap(), NoiseKind::KneserNey);
        assert_eq!("interp".parse::<NoiseKind>().unwrap(), NoiseKind::LinearInterpolation);
        assert!("trigram".parse::<NoiseKind>().is_err());
        assert_eq!("per_timestep".parse::<Granularity>().unwrap(), Granularity::PerTimestep);
        assert!(NoiseScheme::new(NoiseKind::Blank, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn mixture_weights_are_distributions(
            ids in proptest::collection::vec(0u32..10, 2..80),
            gamma in 0.0f64..=1.0,
            kind in 0usize..4,
        ) {
            let stats = stats_for_size(&TokenStream::new(ids), 10);
            let s = scheme(NoiseKind::ALL[kind], gamma);
            for w in 0..10u32 {
                let g = gamma_for(&s, &stats, w);
                prop_assert!((0.0..=gamma).contains(&g));
                let m = mixture_weights(&s, &stats, w);
                prop_assert!((m.total() - 1.0).abs() < 1e-12);
                prop_assert!(m.keep >= 0.0 && m.replace.iter().all(|&r| r >= 0.0));
            }
        }
    }
}
