#![allow(clippy::needless_range_loop)]

use jest_core::contrastive::{sigmoid_nll, softmax_nll, EmbeddingBatch};
use jest_core::flops::{ratio_flexi, ratio_jest};
use jest_core::sampler::{
    gibbs_oracle, independent_sample, jointly_sample_sigmoid, jointly_sample_sigmoid_traced,
    jointly_sample_softmax, uniform_select,
};
use jest_core::scoring::build_scores;
use jest_core::{
    ContrastiveParams, FlopModel, LossKind, LossMatrix, Matrix, ScoreMatrix, ScoringMethod,
    SelectionConfig,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingBatch {
    EmbeddingBatch::new(
        random_matrix(rng, n, dim, 1.0),
        random_matrix(rng, n, dim, 1.0),
    )
    .unwrap()
}

fn is_distinct_in_range(indices: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    indices
        .iter()
        .all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// A config whose sub-batch is exactly `chunk * n_chunks` of `n` items.
fn selection_config(n: usize, chunk: usize, n_chunks: usize) -> SelectionConfig {
    SelectionConfig {
        n_chunks,
        filter_ratio: 1.0 - (chunk * n_chunks) as f64 / n as f64,
        ..Default::default()
    }
}

fn sub_sum(m: &Matrix, idx: &[usize]) -> f64 {
    let mut s = 0.0;
    for &i in idx {
        for &j in idx {
            s += m.get(i, j);
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn samplers_return_distinct_in_range_indices(
        chunk in 1usize..8,
        n_chunks in 1usize..8,
        extra in 0usize..48,
        seed in any::<u64>(),
    ) {
        let b = chunk * n_chunks;
        let n = b + extra;
        let cfg = selection_config(n, chunk, n_chunks);
        prop_assert_eq!(cfg.sub_batch_size(n).unwrap(), b);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = ScoreMatrix::raw(random_matrix(&mut rng, n, n, 5.0)).unwrap();

        for sel in [
            jointly_sample_sigmoid(&scores, &cfg, &mut rng).unwrap(),
            independent_sample(&scores, &cfg, &mut rng).unwrap(),
            uniform_select(&scores, &cfg, &mut rng).unwrap(),
            gibbs_oracle(&scores, b, 2, &mut rng).unwrap(),
        ] {
            prop_assert_eq!(sel.len(), b);
            prop_assert!(is_distinct_in_range(&sel.indices, n));
        }

        let learner = random_batch(&mut rng, n, 4);
        let reference = random_batch(&mut rng, n, 4);
        let p = ContrastiveParams::default();
        let sel = jointly_sample_softmax(&learner, &reference, &p, &p, &cfg, &mut rng).unwrap();
        prop_assert_eq!(sel.len(), b);
        prop_assert!(is_distinct_in_range(&sel.indices, n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn same_seed_same_selection(n in 8usize..64, seed in any::<u64>()) {
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let scores = ScoreMatrix::raw(random_matrix(&mut data_rng, n, n, 3.0)).unwrap();
        let learner = random_batch(&mut data_rng, n, 3);
        let reference = random_batch(&mut data_rng, n, 3);
        let cfg = selection_config(n, 2, 2);
        let p = ContrastiveParams::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                jointly_sample_sigmoid(&scores, &cfg, &mut rng).unwrap(),
                independent_sample(&scores, &cfg, &mut rng).unwrap(),
                jointly_sample_softmax(&learner, &reference, &p, &p, &cfg, &mut rng).unwrap(),
                gibbs_oracle(&scores, 4, 3, &mut rng).unwrap(),
            )
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn chunk_contributions_sum_to_joint_score(
        chunk in 1usize..6,
        n_chunks in 1usize..6,
        extra in 1usize..40,
        seed in any::<u64>(),
    ) {
        let n = chunk * n_chunks + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, n, n, 4.0);
        let scores = ScoreMatrix::raw(m.clone()).unwrap();
        let cfg = selection_config(n, chunk, n_chunks);
        let (sel, traces) = jointly_sample_sigmoid_traced(&scores, &cfg, &mut rng).unwrap();
        prop_assert_eq!(traces.len(), n_chunks);

        // Each chunk adds its conditional logits plus its own cross terms.
        let mut total = 0.0;
        for t in &traces {
            total += t.conditional.iter().sum::<f64>();
            for &i in &t.indices {
                for &j in &t.indices {
                    if i != j {
                        total += m.get(i, j);
                    }
                }
            }
        }
        let direct = sub_sum(&m, &sel.indices);
        prop_assert!((total - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        let b = sel.len() as f64;
        prop_assert!((sel.joint_score - direct / b).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn loss_matrices_permute_with_the_batch(n in 1usize..12, dim in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, n, dim);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = batch.select(&perm).unwrap();
        let p = ContrastiveParams::default();

        let a = sigmoid_nll(&p, &batch).unwrap();
        let b = sigmoid_nll(&p, &permuted).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (b.matrix.values.get(i, j), a.matrix.values.get(perm[i], perm[j]));
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
        prop_assert!((a.loss - b.loss).abs() <= 1e-9 * (1.0 + a.loss.abs()));

        let a = softmax_nll(&p, &batch, None).unwrap();
        let b = softmax_nll(&p, &permuted, None).unwrap();
        for i in 0..n {
            prop_assert!((b.per_example[i] - a.per_example[perm[i]]).abs() <= 1e-9);
        }
    }

    #[test]
    fn learnability_is_antisymmetric(n in 1usize..10, gain in 0.1f64..200.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = LossMatrix { values: random_matrix(&mut rng, n, n, 3.0), kind: LossKind::Sigmoid };
        let r = LossMatrix { values: random_matrix(&mut rng, n, n, 3.0), kind: LossKind::Sigmoid };
        let lr = build_scores(&l, &r, ScoringMethod::Learnability, gain).unwrap();
        let rl = build_scores(&r, &l, ScoringMethod::Learnability, gain).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(lr.get(i, j), -rl.get(i, j));
            }
        }
    }

    #[test]
    fn gain_keeps_the_best_item(n in 2usize..40, g1 in 0.01f64..500.0, g2 in 0.01f64..500.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = LossMatrix { values: random_matrix(&mut rng, n, n, 3.0), kind: LossKind::Sigmoid };
        let r = LossMatrix { values: random_matrix(&mut rng, n, n, 3.0), kind: LossKind::Sigmoid };
        let argmax = |g: f64| {
            let d = build_scores(&l, &r, ScoringMethod::Learnability, g).unwrap().values().diag();
            (0..n).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap()
        };
        prop_assert_eq!(argmax(g1), argmax(g2));
    }

    #[test]
    fn jest_cost_grows_with_filtering(f1 in 0.0f64..0.95, f2 in 0.0f64..0.95) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(ratio_jest(lo).unwrap() <= ratio_jest(hi).unwrap());
        prop_assert!(ratio_jest(lo).unwrap() >= 1.0);
    }

    #[test]
    fn flexi_cost_grows_with_approx_factor(f in 0.0f64..0.95, a1 in 0.1f64..0.9, a2 in 0.1f64..0.9) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(ratio_flexi(f, lo).unwrap() <= ratio_flexi(f, hi).unwrap());
    }

    #[test]
    fn flexi_beats_jest_below_the_break_even_factor(f in 0.0f64..0.95, a in 0.1f64..0.9) {
        let r = 1.0 / (1.0 - f);
        let break_even = (0.5 + r) / (1.5 + r);
        let flexi = ratio_flexi(f, a).unwrap();
        let jest = ratio_jest(f).unwrap();
        if a < break_even - 1e-9 {
            prop_assert!(flexi < jest);
        } else if a > break_even + 1e-9 {
            prop_assert!(flexi > jest);
        }
    }

    #[test]
    fn more_approximation_is_cheaper(
        lambda1 in 0.0f64..=1.0,
        lambda2 in 0.0f64..=1.0,
        a in 0.1f64..0.9,
        b in 1usize..64,
        extra in 0usize..512,
    ) {
        let (lo, hi) = if lambda1 <= lambda2 { (lambda1, lambda2) } else { (lambda2, lambda1) };
        let cost = |lambda| FlopModel::new(1.0, b + extra, b, a, lambda).unwrap().cost_flexi();
        prop_assert!(cost(hi) <= cost(lo));
    }
}
