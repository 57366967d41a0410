//! Vocabulary, token streams and corpus statistics.
//!
//! Text is whitespace tokenized, one sequence per line. Consecutive lines
//! are joined by the end-of-sequence token, which takes part in the bigram
//! statistics like any other word.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use thiserror::Error;

use crate::rng::SeedTree;

pub type WordId = u32;

pub const UNK: WordId = 0;
pub const EOS: WordId = 1;
pub const BLANK: WordId = 2;
/// Reserved ids occupy `0..NUM_RESERVED`; content words follow.
pub const NUM_RESERVED: usize = 3;

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
pub const BLANK_TOKEN: &str = "_";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyInput,
    #[error("vocabulary must start with the reserved tokens {UNK_TOKEN}, {EOS_TOKEN}, {BLANK_TOKEN}")]
    MissingReserved,
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: WordId, size: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Token <-> id map. Ids `0..3` are `<unk>`, `<eos>` and the blank `_`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, WordId>,
}

impl Vocabulary {
    /// Rebuild a vocabulary from its ordered token list (e.g. from a checkpoint).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < NUM_RESERVED
            || tokens[UNK as usize] != UNK_TOKEN
            || tokens[EOS as usize] != EOS_TOKEN
            || tokens[BLANK as usize] != BLANK_TOKEN
        {
            return Err(CorpusError::MissingReserved);
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as WordId).is_some() {
                return Err(CorpusError::DuplicateToken(t.clone()));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] if it is not in the vocabulary.
    pub fn id(&self, token: &str) -> WordId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: WordId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk(&self) -> WordId {
        UNK
    }

    pub fn eos(&self) -> WordId {
        EOS
    }

    pub fn blank(&self) -> WordId {
        BLANK
    }

    pub fn is_reserved(id: WordId) -> bool {
        (id as usize) < NUM_RESERVED
    }
}

/// Build a vocabulary from a token sequence.
///
/// Tokens seen fewer than `min_count` times map to `<unk>`. Content words are
/// ordered by descending count, ties broken by first occurrence.
pub fn build_vocab<'a, I>(tokens: I, min_count: u64) -> Result<Vocabulary, CorpusError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
    let mut n = 0usize;
    for tok in tokens {
        let next = counts.len();
        counts.entry(tok).or_insert((0, next)).0 += 1;
        n += 1;
    }
    if n == 0 {
        return Err(CorpusError::EmptyInput);
    }
    let mut content: Vec<(&str, u64, usize)> = counts
        .into_iter()
        .filter(|(tok, _)| ![UNK_TOKEN, EOS_TOKEN, BLANK_TOKEN].contains(tok))
        .filter(|(_, (c, _))| *c >= min_count)
        .map(|(tok, (c, first))| (tok, c, first))
        .collect();
    content.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

    let mut list: Vec<String> = [UNK_TOKEN, EOS_TOKEN, BLANK_TOKEN].map(String::from).to_vec();
    list.extend(content.into_iter().map(|(t, _, _)| t.to_string()));
    Vocabulary::from_tokens(list)
}

/// Whitespace tokens of every non-empty line.
pub fn lines(text: &str) -> impl Iterator<Item = Vec<&str>> {
    text.lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|l| !l.is_empty())
}

/// Build a vocabulary directly from raw text.
pub fn build_vocab_from_text(text: &str, min_count: u64) -> Result<Vocabulary, CorpusError> {
    build_vocab(text.split_whitespace(), min_count)
}

/// Token ids in corpus order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    pub ids: Vec<WordId>,
}

impl TokenStream {
    pub fn new(ids: Vec<WordId>) -> Self {
        TokenStream { ids }
    }

    /// Encode text with `<eos>` between consecutive lines.
    pub fn encode(text: &str, vocab: &Vocabulary) -> Self {
        let mut ids = Vec::new();
        for (i, line) in lines(text).enumerate() {
            if i > 0 {
                ids.push(EOS);
            }
            ids.extend(line.into_iter().map(|t| vocab.id(t)));
        }
        TokenStream { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), CorpusError> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(CorpusError::IdOutOfRange { id, size: vocab_size }),
            None => Ok(()),
        }
    }
}

/// Unigram and bigram-type statistics over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    /// count(i)
    pub count: Vec<u64>,
    /// Unigram probability U_i.
    pub unigram: Vec<f64>,
    /// Number of distinct bigram types starting with word i.
    pub distinct_after: Vec<u64>,
    /// Number of distinct bigram types ending with word i.
    pub distinct_before: Vec<u64>,
    /// Kneser-Ney continuation probability K_i.
    pub continuation: Vec<f64>,
    pub total_tokens: u64,
    pub bigram_types: u64,
}

impl CorpusStats {
    /// Derive the normalized distributions from raw counts.
    ///
    /// When there are no tokens (or no bigram types) the corresponding
    /// distribution falls back to uniform over content words.
    pub fn from_counts(count: Vec<u64>, distinct_after: Vec<u64>, distinct_before: Vec<u64>) -> Self {
        let v = count.len();
        assert_eq!(distinct_after.len(), v);
        assert_eq!(distinct_before.len(), v);
        let total_tokens: u64 = count.iter().sum();
        let bigram_types: u64 = distinct_before.iter().sum();
        let unigram = normalize_or_uniform(&count);
        let continuation = normalize_or_uniform(&distinct_before);
        CorpusStats {
            count,
            unigram,
            distinct_after,
            distinct_before,
            continuation,
            total_tokens,
            bigram_types,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.count.len()
    }
}

fn normalize_or_uniform(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total > 0 {
        let t = total as f64;
        return counts.iter().map(|&c| c as f64 / t).collect();
    }
    let v = counts.len();
    let first = if v > NUM_RESERVED { NUM_RESERVED } else { 0 };
    let p = 1.0 / (v - first) as f64;
    (0..v).map(|i| if i >= first { p } else { 0.0 }).collect()
}

/// Count unigrams and distinct bigram types over `stream`.
pub fn compute_stats(stream: &TokenStream, vocab: &Vocabulary) -> CorpusStats {
    stats_for_size(stream, vocab.len())
}

/// [`compute_stats`] for a bare vocabulary size.
pub fn stats_for_size(stream: &TokenStream, vocab_size: usize) -> CorpusStats {
    let mut count = vec![0u64; vocab_size];
    for &id in &stream.ids {
        count[id as usize] += 1;
    }
    let mut pairs: Vec<u64> = stream
        .ids
        .windows(2)
        .map(|w| ((w[0] as u64) << 32) | w[1] as u64)
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut distinct_after = vec![0u64; vocab_size];
    let mut distinct_before = vec![0u64; vocab_size];
    for p in pairs {
        distinct_after[(p >> 32) as usize] += 1;
        distinct_before[(p & 0xFFFF_FFFF) as usize] += 1;
    }
    CorpusStats::from_counts(count, distinct_after, distinct_before)
}

/// Format a probability with at most six decimals and no trailing zeros.
pub fn format_prob(p: f64) -> String {
    let s = format!("{p:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Render stats as TSV: word, count, unigram, distinct_after, distinct_before, continuation.
pub fn stats_tsv(vocab: &Vocabulary, stats: &CorpusStats) -> String {
    let mut out = String::from("word\tcount\tunigram\tdistinct_after\tdistinct_before\tcontinuation\n");
    for (i, tok) in vocab.tokens().iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            tok,
            stats.count[i],
            format_prob(stats.unigram[i]),
            stats.distinct_after[i],
            stats.distinct_before[i],
            format_prob(stats.continuation[i]),
        );
    }
    out
}

/// A vocabulary, its training statistics and the encoded splits.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub vocab: Vocabulary,
    pub stats: CorpusStats,
    pub train: TokenStream,
    pub valid: TokenStream,
    pub test: Option<TokenStream>,
}

impl CorpusSplits {
    /// The vocabulary and statistics come from the training text only.
    pub fn from_texts(
        train: &str,
        valid: &str,
        test: Option<&str>,
        min_count: u64,
    ) -> Result<Self, CorpusError> {
        let vocab = build_vocab_from_text(train, min_count)?;
        let train = TokenStream::encode(train, &vocab);
        let valid = TokenStream::encode(valid, &vocab);
        if valid.is_empty() {
            return Err(CorpusError::EmptyInput);
        }
        let test = test.map(|t| TokenStream::encode(t, &vocab));
        let stats = compute_stats(&train, &vocab);
        Ok(CorpusSplits { vocab, stats, train, valid, test })
    }
}

/// Synthetic text from a sparse first-order Markov chain.
///
/// Each word has a fixed set of Zipf-weighted successors, so a model that
/// uses context beats the unigram distribution by a wide margin. Used for
/// fixtures and desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkovCorpus {
    pub vocab_size: usize,
    pub successors: usize,
    pub zipf_exponent: f64,
    pub min_line: usize,
    pub max_line: usize,
    /// Fixes the transition table; splits sharing it come from one chain.
    pub chain_seed: u64,
}

impl Default for MarkovCorpus {
    fn default() -> Self {
        MarkovCorpus { vocab_size: 300, successors: 24, zipf_exponent: 1.0, min_line: 6, max_line: 24, chain_seed: 0 }
    }
}

impl MarkovCorpus {
    /// Generate roughly `n_tokens` tokens (whole lines) of text; `seed`
    /// picks the sample path through the chain.
    pub fn generate(&self, n_tokens: usize, seed: u64) -> String {
        let v = self.vocab_size.max(1);
        let zipf: Vec<f64> = (0..v).map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_exponent)).collect();
        let start = WeightedIndex::new(&zipf).expect("positive weights");
        let k = self.successors.clamp(1, v);
        let succ_weights = WeightedIndex::new(&zipf[..k]).expect("positive weights");
        let mut chain_rng = SeedTree::new(self.chain_seed).rng();
        let table: Vec<Vec<usize>> = (0..v)
            .map(|_| {
                let mut s: Vec<usize> = Vec::with_capacity(k);
                while s.len() < k {
                    let w = start.sample(&mut chain_rng);
                    if !s.contains(&w) {
                        s.push(w);
                    }
                }
                s
            })
            .collect();
        let mut rng = SeedTree::new(seed).child(1).rng();
        let mut out = String::new();
        let mut produced = 0;
        while produced < n_tokens {
            let len = rng.random_range(self.min_line..=self.max_line.max(self.min_line));
            let mut w = start.sample(&mut rng);
            for i in 0..len {
                if i > 0 {
                    out.push(' ');
                    w = table[w][succ_weights.sample(&mut rng)];
                }
                let _ = write!(out, "w{w}");
            }
            out.push('\n');
            produced += len;
        }
        out
    }
}
