//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use jest_core::contrastive::{
    grad_sigmoid_nll, grad_softmax_nll, sigmoid_nll, softmax_nll, EmbeddingBatch, LossKind,
};
use jest_core::flops::{iso_flop_budget, multires_train_cost_fraction, ratio_flexi, ratio_jest};
use jest_core::harness::synthetic::{learnability_scores, shuffled_block_scores};
use jest_core::harness::{run_experiment, run_experiment_to, ExperimentConfig, Scenario};
use jest_core::sampler::{
    enumerate_exact, gibbs_oracle, independent_sample, jointly_sample_sigmoid, uniform_select,
};
use jest_core::scoring::{read_reference_cache, write_reference_cache};
use jest_core::trainer::{
    encode, loss_and_grad, select_sub_batch, train_step, AdamState, DualEncoderParams, PairInputs,
    Resolution, SelectionPolicy, SuperBatch, TrainConfig,
};
use jest_core::{ContrastiveParams, Matrix, ReferenceCache, ScoreMatrix, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn trunc2(x: f64) -> f64 {
    (x * 100.0 + 1e-9).floor() / 100.0
}

fn criterion_1() -> Outcome {
    let jest = ratio_jest(0.8).unwrap();
    let flexi_25 = ratio_flexi(0.8, 0.25).unwrap();
    let flexi_28 = ratio_flexi(0.8, 0.28).unwrap();
    let mut ok = (jest - 7.0 / 3.0).abs() < 1e-12 && trunc2(jest) == 2.33;
    // Reported to two decimals, truncated.
    ok &= trunc2(flexi_25) == 1.04 && trunc2(flexi_28) == 1.10;
    let expected = [3.0, 3.69, 4.8, 6.86, 10.43];
    let mut iso = Vec::new();
    for (lambda, want) in [0.0, 0.25, 0.5, 0.75, 0.95].into_iter().zip(expected) {
        let got = iso_flop_budget(3.0, lambda).unwrap();
        ok &= ((got - want) / want).abs() <= 0.005;
        iso.push(got);
    }
    let (flops, time) = multires_train_cost_fraction();
    ok &= (flops - 0.64).abs() < 1e-12 && (time - 2.0 / 3.0).abs() < 1e-12;
    check(
        ok,
        format!(
            "jest {jest:.4}, flexi(A=.25) {flexi_25:.4}, flexi(A=.28) {flexi_28:.4}, \
             iso {:.3?}, multires ({flops:.3}, {time:.3})",
            iso
        ),
    )
}

fn criterion_2() -> Outcome {
    let cfg = SelectionConfig {
        n_chunks: 16,
        filter_ratio: 0.8,
        ..Default::default()
    };
    let params = ContrastiveParams::default();
    let (mut joint, mut gibbs, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
        let s = learnability_scores(2048, 16, 0.5, 0.3, &params, cfg.gain, &mut rng).unwrap();
        let b = cfg.sub_batch_size(2048).unwrap();
        let j = jointly_sample_sigmoid(&s, &cfg, &mut rng)
            .unwrap()
            .joint_score;
        let u = uniform_select(&s, &cfg, &mut rng).unwrap().joint_score;
        let g = gibbs_oracle(&s, b, 1000, &mut rng).unwrap().joint_score;
        joint.push(j);
        gibbs.push(g);
        gaps.push(j - u);
    }
    let (mj, _) = mean_se(&joint);
    let (mg, _) = mean_se(&gibbs);
    let rel = (mj - mg).abs() / mg.abs();
    let (gap, se) = mean_se(&gaps);
    let z = gap / se;
    check(
        rel <= 0.05 && z >= 5.0,
        format!("joint {mj:.3} vs gibbs {mg:.3} (rel diff {rel:.4}); joint - uniform = {gap:.2}, {z:.1} SE"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (case, (n, b)) in [(8usize, 3usize), (8, 2), (6, 3), (5, 1)]
        .into_iter()
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + case as u64);
        let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let s = ScoreMatrix::raw(m).unwrap();
        let exact = enumerate_exact(&s, b).unwrap();
        let mut counts = vec![0usize; exact.len()];
        let chains = 10_000;
        for _ in 0..chains {
            let mut sel = gibbs_oracle(&s, b, 30, &mut rng).unwrap().indices;
            sel.sort_unstable();
            let k = exact
                .iter()
                .position(|e| e.indices == sel)
                .expect("enumerated");
            counts[k] += 1;
        }
        let tv = 0.5
            * exact
                .iter()
                .zip(&counts)
                .map(|(e, &c)| (e.probability - c as f64 / chains as f64).abs())
                .sum::<f64>();
        worst = worst.max(tv);
        details.push(format!("B={n},b={b}: {tv:.4}"));
    }
    check(
        worst <= 0.05,
        format!("total variation {}", details.join(", ")),
    )
}

fn criterion_4() -> Outcome {
    let params = ContrastiveParams::default();
    let mut stats = Vec::new();
    for (f, super_batch) in [(0.5, 256usize), (0.8, 640), (0.9, 1280)] {
        let cfg = SelectionConfig {
            n_chunks: 16,
            filter_ratio: f,
            ..Default::default()
        };
        assert_eq!(cfg.sub_batch_size(super_batch).unwrap(), 128);
        let scores: Vec<f64> = (0..100u64)
            .map(|run| {
                let mut rng = ChaCha8Rng::seed_from_u64(4000 + run);
                let s = learnability_scores(super_batch, 16, 0.5, 0.3, &params, cfg.gain, &mut rng)
                    .unwrap();
                jointly_sample_sigmoid(&s, &cfg, &mut rng)
                    .unwrap()
                    .joint_score
            })
            .collect();
        stats.push((f, mean_se(&scores)));
    }
    let mut ok = true;
    for w in stats.windows(2) {
        let ((_, (m0, s0)), (_, (m1, s1))) = (w[0], w[1]);
        ok &= m1 >= m0 - 2.0 * (s0 * s0 + s1 * s1).sqrt();
    }
    let text: Vec<String> = stats
        .iter()
        .map(|(f, (m, s))| format!("f={f}: {m:.2} ± {s:.2}"))
        .collect();
    check(
        ok,
        format!("mean joint score at b=128: {}", text.join(", ")),
    )
}

fn criterion_5() -> Outcome {
    let cfg = SelectionConfig {
        n_chunks: 16,
        filter_ratio: 0.8,
        ..Default::default()
    };
    let mut diffs = Vec::new();
    let (mut j_all, mut i_all) = (0.0, 0.0);
    for k in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + k);
        let s = shuffled_block_scores(1024, 16, 0.5, 0.1, &mut rng).unwrap();
        let j = jointly_sample_sigmoid(&s, &cfg, &mut rng)
            .unwrap()
            .joint_score;
        let i = independent_sample(&s, &cfg, &mut rng).unwrap().joint_score;
        j_all += j / 50.0;
        i_all += i / 50.0;
        diffs.push(j - i);
    }
    let (gap, se) = mean_se(&diffs);
    let z = gap / se;
    check(
        z >= 5.0,
        format!("joint {j_all:.3} vs independent {i_all:.3}: difference {z:.1} SE"),
    )
}

/// Relative error, or zero when the absolute error is below `1e-9`.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let err = (analytic - numeric).abs();
    if err <= 1e-9 {
        0.0
    } else {
        err / analytic.abs().max(numeric.abs())
    }
}

/// Returns (checked, worst relative error).
#[allow(clippy::needless_range_loop)]
fn gradient_check_seed(seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (5, 4);
    let raw_img = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let raw_txt = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let batch = EmbeddingBatch::new(raw_img, raw_txt).unwrap();
    let params = ContrastiveParams::new(
        rng.random_range(0.5..5.0),
        rng.random_range(-3.0..1.0),
        rng.random_range(0.5..5.0),
    )
    .unwrap();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut record = |a: f64, fd: f64| {
        checked += 1;
        worst = worst.max(rel_error(a, fd));
    };
    let h = 1e-5;
    for kind in [LossKind::Sigmoid, LossKind::Softmax] {
        let loss = |p: &ContrastiveParams, b: &EmbeddingBatch| match kind {
            LossKind::Sigmoid => sigmoid_nll(p, b).unwrap().loss,
            LossKind::Softmax => softmax_nll(p, b, None).unwrap().loss,
        };
        let g = match kind {
            LossKind::Sigmoid => grad_sigmoid_nll(&params, &batch).unwrap(),
            LossKind::Softmax => grad_softmax_nll(&params, &batch).unwrap(),
        };
        // Head parameters.
        let bump = |da: f64, db: f64, dt: f64| {
            ContrastiveParams::new(params.alpha + da, params.beta + db, params.t + dt).unwrap()
        };
        let fd = |pp: ContrastiveParams, pm: ContrastiveParams| {
            (loss(&pp, &batch) - loss(&pm, &batch)) / (2.0 * h)
        };
        match kind {
            LossKind::Sigmoid => {
                record(g.alpha, fd(bump(h, 0.0, 0.0), bump(-h, 0.0, 0.0)));
                record(g.beta, fd(bump(0.0, h, 0.0), bump(0.0, -h, 0.0)));
            }
            LossKind::Softmax => record(g.t, fd(bump(0.0, 0.0, h), bump(0.0, 0.0, -h))),
        }
        // Embeddings live on the unit sphere; moving entry (i, k) and
        // renormalizing changes the loss at rate g·δ - (g·e)(δ·e).
        for side in 0..2 {
            let (emb, grad) = if side == 0 {
                (batch.image(), &g.image)
            } else {
                (batch.text(), &g.text)
            };
            for i in 0..n {
                let e = emb.row(i);
                let ge: f64 = grad.row(i).iter().zip(e).map(|(a, b)| a * b).sum();
                for k in 0..d {
                    let analytic = grad.get(i, k) - ge * e[k];
                    let shifted = |s: f64| {
                        let mut m = emb.clone();
                        m.set(i, k, m.get(i, k) + s);
                        let b = if side == 0 {
                            EmbeddingBatch::new(m, batch.text().clone())
                        } else {
                            EmbeddingBatch::new(batch.image().clone(), m)
                        };
                        loss(&params, &b.unwrap())
                    };
                    record(analytic, (shifted(h) - shifted(-h)) / (2.0 * h));
                }
            }
        }
        // Full trainer chain: linear encoders, normalization, head.
        let input_dim = 6;
        let enc = DualEncoderParams::init(input_dim, d, params, &mut rng).unwrap();
        let inputs = PairInputs::new(
            Matrix::from_fn(n, input_dim, |_, _| rng.random_range(-1.0..1.0)),
            Matrix::from_fn(n, input_dim, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let approx = [false, true, false, true, false];
        let lg = loss_and_grad(&enc, &inputs, &approx, Resolution::Coarse, kind).unwrap();
        let eval = |p: &DualEncoderParams| {
            loss_and_grad(p, &inputs, &approx, Resolution::Coarse, kind)
                .unwrap()
                .loss
        };
        let w = input_dim * d;
        for idx in 0..w {
            for (side, offset) in [(0, 0), (1, w)] {
                let mut plus = enc.clone();
                let mut minus = enc.clone();
                let (pm, mm) = if side == 0 {
                    (&mut plus.image_weights, &mut minus.image_weights)
                } else {
                    (&mut plus.text_weights, &mut minus.text_weights)
                };
                pm.as_mut_slice()[idx] += h;
                mm.as_mut_slice()[idx] -= h;
                record(
                    lg.grad[offset + idx],
                    (eval(&plus) - eval(&minus)) / (2.0 * h),
                );
            }
        }
    }
    (checked, worst)
}

fn criterion_6() -> Outcome {
    let mut total = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (c, w) = gradient_check_seed(600 + seed);
        total += c;
        worst = worst.max(w);
    }
    check(
        worst <= 1e-5,
        format!("{total} partial derivatives over 20 seeds, worst relative error {worst:.2e}"),
    )
}

fn criterion_7() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let cfg = ExperimentConfig {
            scenario: Scenario::Jest,
            ..Default::default()
        }
        .with_seed(seed);
        let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
        ratios.push(out.summary("jest").expect("jest run").step_ratio());
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    check(
        mean <= 0.5,
        format!("steps to reach the IID final accuracy / IID steps: {ratios:.3?}, mean {mean:.3}"),
    )
}

fn random_params(seed: u64, input_dim: usize, d: usize) -> DualEncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DualEncoderParams::init(input_dim, d, ContrastiveParams::default(), &mut rng).unwrap()
}

fn random_inputs(seed: u64, n: usize, dim: usize) -> PairInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PairInputs::new(
        Matrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0)),
        Matrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0)),
    )
    .unwrap()
}

fn criterion_8() -> Outcome {
    // Learner and reference are the same model: all learnability scores vanish.
    let (n, dim, d) = (6, 8, 4);
    let learner = random_params(80, dim, d);
    let inputs = random_inputs(81, n, dim);
    let cache = ReferenceCache::from_batch(
        &encode(&learner, &inputs, Resolution::Full).unwrap(),
        learner.head,
    )
    .unwrap();
    let cfg = TrainConfig {
        super_batch: n,
        sub_batch: 2,
        selection: SelectionConfig {
            n_chunks: 2,
            filter_ratio: 2.0 / 3.0,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.validate().unwrap();
    let batch = SuperBatch {
        inputs,
        ids: (0..n).collect(),
    };
    let subsets: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let mut counts = vec![0usize; subsets.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let draws = 10_000;
    for _ in 0..draws {
        let mut sel = select_sub_batch(&learner, Some(&cache), &batch, &cfg, &mut rng)
            .unwrap()
            .indices;
        sel.sort_unstable();
        counts[subsets.iter().position(|&p| p == (sel[0], sel[1])).unwrap()] += 1;
    }
    let expected = draws as f64 / subsets.len() as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((subsets.len() - 1) as f64).unwrap();
    let p_value = 1.0 - dist.cdf(chi2);

    // f = 0: joint selection keeps the whole batch, so a JEST step must equal
    // an IID step bit for bit.
    let b = 16;
    let step_inputs = random_inputs(83, b, dim);
    let step_cache = ReferenceCache::from_batch(
        &encode(&random_params(84, dim, d), &step_inputs, Resolution::Full).unwrap(),
        ContrastiveParams::default(),
    )
    .unwrap();
    let step_batch = SuperBatch {
        inputs: step_inputs,
        ids: (0..b).collect(),
    };
    let base = TrainConfig {
        super_batch: b,
        sub_batch: b,
        selection: SelectionConfig {
            n_chunks: 1,
            filter_ratio: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let jest_cfg = TrainConfig {
        policy: SelectionPolicy::Joint,
        ..base.clone()
    };
    let iid_cfg = TrainConfig {
        policy: SelectionPolicy::Uniform,
        ..base
    };
    let opt = AdamState::new(learner.num_params());
    let run = |cfg: &TrainConfig, cache: Option<&ReferenceCache>| {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        train_step(&learner, cache, &step_batch, cfg, &opt, 0, &mut rng).unwrap()
    };
    let (p_jest, s_jest, m_jest) = run(&jest_cfg, Some(&step_cache));
    let (p_iid, s_iid, m_iid) = run(&iid_cfg, None);
    let identical =
        p_jest == p_iid && s_jest == s_iid && m_jest.loss.to_bits() == m_iid.loss.to_bits();
    check(
        p_value > 0.01 && identical,
        format!(
            "chi-square {chi2:.2} on 14 df, p = {p_value:.3}; f=0 step identical to IID: {identical}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let (n, d) = (64, 8);
    let batch = EmbeddingBatch::new(
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)),
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)),
    )
    .unwrap();
    let cache = ReferenceCache::from_batch(&batch, ContrastiveParams::new(3.0, -2.0, 7.0).unwrap())
        .unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ref.cache");
    write_reference_cache(&cache, &path).map_err(|e| e.to_string())?;
    let back = read_reference_cache(&path).map_err(|e| e.to_string())?;
    let on_disk = std::fs::read(&path).map_err(|e| e.to_string())?;
    let bytes_equal = on_disk == cache.to_bytes() && back.to_bytes() == on_disk;
    let ids: Vec<usize> = (0..n).step_by(3).collect();
    let mut losses_equal = true;
    for kind in [LossKind::Sigmoid, LossKind::Softmax] {
        let a = cache.loss_matrix(&ids, kind).unwrap();
        let b = back.loss_matrix(&ids, kind).unwrap();
        losses_equal &= a
            .values
            .as_slice()
            .iter()
            .zip(b.values.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }
    check(
        back == cache && bytes_equal && losses_equal,
        format!(
            "{} bytes; cache equal {}, bytes equal {bytes_equal}, loss matrices identical {losses_equal}",
            on_disk.len(),
            back == cache
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut failures = Vec::new();
    for scenario in Scenario::ALL {
        let mut cfg = ExperimentConfig {
            scenario,
            ..Default::default()
        }
        .with_seed(7);
        cfg.train.steps = 40;
        cfg.reference.steps = 40;
        cfg.dataset.uncurated_size = 3000;
        if scenario == Scenario::FlexiJest {
            cfg.train.approx_fraction = 0.5;
        }
        let read = |tag: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let out = dir.path().join(tag);
            run_experiment_to(&cfg, &out).map_err(|e| e.to_string())?;
            Ok((
                std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?,
                std::fs::read(out.join("summary.csv")).map_err(|e| e.to_string())?,
            ))
        };
        if read("a")? != read("b")? {
            failures.push(scenario.as_str());
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "all 7 scenarios byte-identical on rerun".to_string()
        } else {
            format!("CSV differs on rerun for {failures:?}")
        },
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("flop formulas", criterion_1),
        ("sampler vs Gibbs oracle", criterion_2),
        ("Gibbs vs exact enumeration", criterion_3),
        ("filtering-ratio monotonicity", criterion_4),
        ("joint beats independent", criterion_5),
        ("gradient correctness", criterion_6),
        ("training acceleration", criterion_7),
        ("neutrality", criterion_8),
        ("cache round trip", criterion_9),
        ("determinism", criterion_10),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !only.is_empty() && !only.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {number:>2} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {number:>2} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
