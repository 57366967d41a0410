//! Sequential versus rayon execution for the embarrassingly parallel paths.
//!
//! Without the `parallel` feature both variants run on one thread.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use varsmooth::corpus::{build_vocab_from_text, compute_stats, CorpusSplits, MarkovCorpus, TokenStream};
use varsmooth::lm::{LmConfig, ModelParams};
use varsmooth::noising::{monte_carlo_pseudocounts_with, NoiseKind, NoiseScheme};
use varsmooth::par::Execution;
use varsmooth::rng::SeedTree;
use varsmooth::trainer::{evaluate, EvalSetup};
use varsmooth::variational::PredictMode;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn pseudocounts(c: &mut Criterion) {
    let text = MarkovCorpus::default().generate(2_000, 1);
    let vocab = build_vocab_from_text(&text, 1).unwrap();
    let stream = TokenStream::encode(&text, &vocab);
    let stats = compute_stats(&stream, &vocab);
    let scheme = NoiseScheme::new(NoiseKind::KneserNey, 0.2).unwrap();
    let mut group = c.benchmark_group("monte_carlo_pseudocounts");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 8192), &exec, |b, &exec| {
            b.iter(|| monte_carlo_pseudocounts_with(&scheme, &stats, &stream, 8192, SeedTree::new(3), exec).unwrap())
        });
    }
    group.finish();
}

fn sampled_evaluation(c: &mut Criterion) {
    let m = MarkovCorpus::default();
    let splits = CorpusSplits::from_texts(&m.generate(20_000, 1), &m.generate(2_000, 2), None, 1).unwrap();
    let cfg = LmConfig::new(splits.vocab.len(), 32, 32, true);
    let params = ModelParams::init(cfg, &mut SeedTree::new(4).rng()).unwrap();
    let scheme = NoiseScheme::new(NoiseKind::KneserNey, 0.2).unwrap();
    let mut group = c.benchmark_group("sample_avg_eval");
    group.sample_size(10);
    for (name, exec) in MODES {
        let setup = EvalSetup { scheme: &scheme, stats: &splits.stats, lanes: 16, bptt: 35, seed: 5, exec };
        group.bench_with_input(BenchmarkId::new(name, 8), &setup, |b, setup| {
            b.iter(|| evaluate(black_box(&params), setup, &splits.valid, PredictMode::SampleAvg(8)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pseudocounts, sampled_evaluation);
criterion_main!(benches);
