//! Sequential vs rayon execution of the data-parallel kernels.
//!
//! Built without the `parallel` feature both variants run on one thread, which
//! gives the overhead baseline.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lazystrike::lazystrike::lazystrike_pool_batch;
use lazystrike::spectral::{low_pass_filter_with, GaussianWeights};
use lazystrike::vit::{evaluate, gen_synthetic, train, SynthConfig, ToyViTConfig, ToyViTParams, TrainOptions};
use lazystrike::{Execution, FeatureMap, LazyStrikeParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn random_map(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
    let t = Tensor::randn(&[h * w * d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    FeatureMap::new(h, w, d, t.data().to_vec()).unwrap()
}

fn filtering(c: &mut Criterion) {
    let mut group = c.benchmark_group("low_pass_filter");
    let x = random_map(14, 14, 384, 0);
    let g = GaussianWeights::new(384, 48.0).unwrap();
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| low_pass_filter_with(&x, &g, e).unwrap())
        });
    }
    group.finish();
}

fn pooling(c: &mut Criterion) {
    let mut group = c.benchmark_group("lazystrike_pool_batch");
    let maps: Vec<FeatureMap> = (0..32).map(|i| random_map(8, 8, 96, i)).collect();
    let params = LazyStrikeParams::new(32, 12.0, 1e-6);
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| lazystrike_pool_batch(&maps, &params, e).unwrap())
        });
    }
    group.finish();
}

fn toy_vit(c: &mut Criterion) {
    let cfg = ToyViTConfig::default();
    let data = gen_synthetic(64, &SynthConfig::default()).unwrap();
    let params = ToyViTParams::init(&cfg).unwrap();
    let opts = TrainOptions { epochs: 1, ..Default::default() };
    let mut group = c.benchmark_group("toy_vit");
    group.sample_size(10);
    for exec in MODES {
        group.bench_with_input(BenchmarkId::new("evaluate", format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| evaluate(&params, &cfg, &data, e).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("train_epoch", format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| train(&cfg, &data[..32], &data[32..], &opts, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, filtering, pooling, toy_vit);
criterion_main!(benches);
