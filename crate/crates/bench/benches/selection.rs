use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jest_core::contrastive::{sigmoid_nll, softmax_nll, EmbeddingBatch};
use jest_core::harness::synthetic::learnability_scores;
use jest_core::sampler::{gibbs_oracle, independent_sample, jointly_sample_sigmoid};
use jest_core::trainer::{
    train_step, AdamState, DualEncoderParams, PairInputs, SelectionPolicy, SuperBatch, TrainConfig,
};
use jest_core::{ContrastiveParams, Matrix, ReferenceCache, ScoreMatrix, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores(n: usize) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    learnability_scores(
        n,
        16,
        0.5,
        0.3,
        &ContrastiveParams::default(),
        100.0,
        &mut rng,
    )
    .unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn samplers(c: &mut Criterion) {
    let s = scores(2048);
    let mut group = c.benchmark_group("select_2048");
    for f in [0.5, 0.8, 0.9] {
        let cfg = SelectionConfig {
            filter_ratio: f,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::new("joint", f), &cfg, |b, cfg| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| jointly_sample_sigmoid(black_box(&s), cfg, &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("independent", f), &cfg, |b, cfg| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| independent_sample(black_box(&s), cfg, &mut rng).unwrap())
        });
    }
    group.sample_size(10);
    group.bench_function("gibbs_10_sweeps", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter(|| gibbs_oracle(black_box(&s), 400, 10, &mut rng).unwrap())
    });
    group.finish();
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("loss_matrix");
    for n in [256, 1024] {
        let batch = EmbeddingBatch::new(
            random_matrix(&mut rng, n, 64),
            random_matrix(&mut rng, n, 64),
        )
        .unwrap();
        let p = ContrastiveParams::default();
        group.bench_with_input(BenchmarkId::new("sigmoid", n), &batch, |b, batch| {
            b.iter(|| sigmoid_nll(&p, black_box(batch)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("softmax", n), &batch, |b, batch| {
            b.iter(|| softmax_nll(&p, black_box(batch), None).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (input_dim, d, big) = (32, 16, 160);
    let learner =
        DualEncoderParams::init(input_dim, d, ContrastiveParams::default(), &mut rng).unwrap();
    let inputs = PairInputs::new(
        random_matrix(&mut rng, big, input_dim),
        random_matrix(&mut rng, big, input_dim),
    )
    .unwrap();
    let cache = ReferenceCache::from_batch(
        &EmbeddingBatch::new(
            random_matrix(&mut rng, big, d),
            random_matrix(&mut rng, big, d),
        )
        .unwrap(),
        ContrastiveParams::default(),
    )
    .unwrap();
    let batch = SuperBatch {
        inputs,
        ids: (0..big).collect(),
    };
    let opt = AdamState::new(learner.num_params());
    let mut group = c.benchmark_group("train_step");
    for policy in [SelectionPolicy::Joint, SelectionPolicy::Independent] {
        let cfg = TrainConfig {
            policy,
            ..Default::default()
        };
        group.bench_function(format!("{policy:?}"), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            b.iter(|| train_step(&learner, Some(&cache), &batch, &cfg, &opt, 0, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, samplers, losses, training);
criterion_main!(benches);
