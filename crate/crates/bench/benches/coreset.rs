use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cstk_core::classifier::train_one_class;
use cstk_core::lowrank::{reduce, ReductionParams};
use cstk_core::sampling::hierarchical_sample;
use cstk_core::tracker::{generate_stream, run_cat, SyntheticStreamConfig, TrackerConfig};
use cstk_core::{CoresetTree, DataBlock, TrainParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rows(count: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count * dim)
        .map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn filled_tree(n: usize, dim: usize, points: usize) -> CoresetTree {
    let data = rows(points, dim, 7);
    let mut tree = CoresetTree::new(n, dim).unwrap().without_series();
    for row in data.chunks(dim) {
        tree.push_point(row).unwrap();
    }
    tree
}

fn push_point(c: &mut Criterion) {
    let mut group = c.benchmark_group("push_point");
    for (n, dim) in [(16, 16), (32, 64), (64, 128)] {
        let data = rows(n * 64, dim, 1);
        group.bench_with_input(BenchmarkId::new("stream_64_leaves", format!("n{n}_d{dim}")), &data, |b, data| {
            b.iter(|| {
                let mut tree = CoresetTree::new(n, dim).unwrap().without_series();
                for row in data.chunks(dim) {
                    black_box(tree.push_point(row).unwrap());
                }
                tree
            })
        });
    }
    group.finish();
}

fn reduce_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("reduce");
    for (n, dim) in [(16, 32), (64, 128), (128, 256)] {
        let block = DataBlock::from_row_slice(2 * n, dim, &rows(2 * n, dim, 2)).unwrap();
        let params = ReductionParams::new(n, 1, dim, 0.1).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("{}x{dim}_to_{n}", 2 * n)), |b| {
            b.iter(|| reduce(black_box(&block), &params).unwrap())
        });
    }
    group.finish();
}

fn sample_and_train(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample_and_train");
    let params = TrainParams::default();
    for leaves in [8usize, 64, 512] {
        let tree = filled_tree(32, 32, 32 * leaves);
        let view = tree.snapshot();
        group.bench_function(BenchmarkId::new("hierarchical_sample", leaves), |b| {
            b.iter(|| hierarchical_sample(black_box(&view)).unwrap())
        });
        let sample = hierarchical_sample(&view).unwrap();
        group.bench_function(BenchmarkId::new("train_on_sample", leaves), |b| {
            b.iter(|| train_one_class(black_box(sample.rows()), &params).unwrap())
        });
    }
    group.finish();
}

fn tracking_run(c: &mut Criterion) {
    let stream = SyntheticStreamConfig {
        dim: 32,
        frames: 100,
        drift_rate: 0.06,
        noise_scale: 0.1,
        ..SyntheticStreamConfig::default()
    };
    let frames = generate_stream(&stream).unwrap();
    let mut config = TrackerConfig::new(8, stream.grid_spacing);
    config.train.nu = 1.0;
    config.threshold = Some(0.0);
    c.bench_function("run_cat_100_frames", |b| {
        b.iter(|| run_cat(black_box(&frames), &config).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = push_point, reduce_block, sample_and_train, tracking_run
}
criterion_main!(benches);
