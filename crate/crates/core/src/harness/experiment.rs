//! End-to-end runs: train a reference on the curated split, cache its
//! embeddings of the uncurated split, then train learners on the uncurated
//! split under the scenario's selection policies.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::ContrastiveParams;
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Scenario};
use crate::harness::dataset::{generate_dataset, PairSet, SyntheticDataset};
use crate::sampler;
use crate::scoring::{ReferenceCache, ScoringMethod};
use crate::trainer::{
    encode, evaluate, train_step, AdamState, DualEncoderParams, FlopScheme, Resolution,
    SelectionPolicy, SuperBatch, TrainConfig, TrainMetrics,
};

/// Metrics CSV columns, in order.
pub const CSV_COLUMNS: [&str; 9] = [
    "run",
    "seed",
    "step",
    "loss",
    "mean_selected_score",
    "eval_i2t_top1",
    "eval_t2i_top1",
    "cumulative_flops",
    "skipped",
];

/// Summary CSV columns, in order.
pub const SUMMARY_COLUMNS: [&str; 6] = [
    "run",
    "final_i2t_top1",
    "final_t2i_top1",
    "steps",
    "steps_to_baseline",
    "flops_to_baseline",
];

/// Width of the trailing mean used to compare eval curves.
pub const SMOOTHING_WINDOW: usize = 5;

/// Initial head of every learner and reference.
pub fn initial_head() -> ContrastiveParams {
    ContrastiveParams::new(10.0, -10.0, 10.0).expect("valid constants")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub name: String,
    pub metrics: Vec<TrainMetrics>,
}

impl RunRecord {
    /// `(steps taken, i2t)` at every evaluated step.
    pub fn eval_curve(&self) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter_map(|m| m.eval_i2t_top1.map(|v| (m.step + 1, v)))
            .collect()
    }

    fn eval_t2i_curve(&self) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter_map(|m| m.eval_t2i_top1.map(|v| (m.step + 1, v)))
            .collect()
    }
}

fn trailing_means(curve: &[(usize, f64)]) -> Vec<(usize, f64)> {
    curve
        .windows(SMOOTHING_WINDOW)
        .map(|w| {
            let mean = w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64;
            (w[w.len() - 1].0, mean)
        })
        .collect()
}

/// Trailing mean of the last evaluated points; falls back to the mean of all
/// points when fewer than the window were recorded.
pub fn final_smoothed(curve: &[(usize, f64)]) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let tail = &curve[curve.len().saturating_sub(SMOOTHING_WINDOW)..];
    Some(tail.iter().map(|p| p.1).sum::<f64>() / tail.len() as f64)
}

/// First number of steps at which the trailing mean reaches `target`.
pub fn steps_to_reach(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    trailing_means(curve)
        .into_iter()
        .find(|&(_, v)| v >= target)
        .map(|(s, _)| s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub final_i2t: f64,
    pub final_t2i: f64,
    pub steps: usize,
    pub steps_to_baseline: Option<usize>,
    pub flops_to_baseline: Option<f64>,
}

impl RunSummary {
    /// `steps_to_baseline / steps`, infinite when the baseline was never met.
    pub fn step_ratio(&self) -> f64 {
        match self.steps_to_baseline {
            Some(s) => s as f64 / self.steps as f64,
            None => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<RunSummary>,
    pub metrics_csv: String,
    pub summary_csv: String,
}

impl ExperimentOutcome {
    pub fn summary(&self, run: &str) -> Option<&RunSummary> {
        self.summaries.iter().find(|s| s.run == run)
    }
}

fn step_rng(seed: u64, salt: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(step as u64);
    rng
}

const LEARNER_SALT: u64 = 0x6c65_6172_6e65_7200;
const REFERENCE_SALT: u64 = 0x7265_6665_7265_6e63;

fn init_params(cfg: &ExperimentConfig, salt: u64) -> Result<DualEncoderParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
    DualEncoderParams::init(
        cfg.dataset.input_dim,
        cfg.embed_dim,
        initial_head(),
        &mut rng,
    )
}

/// Trains the reference with uniform batches from the curated split.
pub fn train_reference(cfg: &ExperimentConfig, curated: &PairSet) -> Result<DualEncoderParams> {
    let r = &cfg.reference;
    let train = TrainConfig {
        steps: r.steps,
        super_batch: r.batch_size,
        sub_batch: r.batch_size,
        policy: SelectionPolicy::Uniform,
        approx_fraction: 0.0,
        approx_scoring: false,
        flop_scheme: FlopScheme::Iid,
        learning_rate: r.learning_rate,
        ..cfg.train.clone()
    };
    let all: Vec<usize> = (0..curated.len()).collect();
    let record = run_learner(
        "reference",
        cfg,
        &train,
        curated,
        &all,
        None,
        None,
        init_params(cfg, REFERENCE_SALT)?,
        REFERENCE_SALT,
    )?;
    Ok(record.1)
}

/// Embeds every uncurated item with the reference.
pub fn build_cache(reference: &DualEncoderParams, pool: &PairSet) -> Result<ReferenceCache> {
    let emb = encode(reference, &pool.inputs, Resolution::Full)?;
    ReferenceCache::from_batch(&emb, reference.head)
}

/// The `keep` fraction of cached items with the highest reference alignment
/// (diagonal logit), in ascending row order.
pub fn filter_by_reference(cache: &ReferenceCache, keep: f64) -> Result<Vec<usize>> {
    let n = cache.n();
    let count = ((n as f64 * keep) as usize).clamp(1, n);
    let d = cache.dim();
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let a = &cache.image()[i * d..(i + 1) * d];
            let b = &cache.text()[i * d..(i + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            (s, i)
        })
        .collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut rows: Vec<usize> = scored[..count].iter().map(|p| p.1).collect();
    rows.sort_unstable();
    Ok(rows)
}

/// Trains one learner on super-batches drawn uniformly from `pool_rows` of
/// `pool`. Returns the record and the final parameters.
#[allow(clippy::too_many_arguments)]
fn run_learner(
    name: &str,
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    pool: &PairSet,
    pool_rows: &[usize],
    cache: Option<&ReferenceCache>,
    holdout: Option<&PairSet>,
    init: DualEncoderParams,
    salt: u64,
) -> Result<(RunRecord, DualEncoderParams)> {
    train.validate()?;
    let mut learner = init;
    let mut opt = AdamState::new(learner.num_params());
    let mut metrics = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut rng = step_rng(cfg.seed, salt, step);
        let picks = sampler::uniform_sample(pool_rows.len(), train.super_batch, &mut rng)?;
        let ids: Vec<usize> = picks.iter().map(|&p| pool_rows[p]).collect();
        let batch = SuperBatch {
            inputs: pool.inputs.select(&ids),
            ids,
        };
        let (next, next_opt, mut m) =
            train_step(&learner, cache, &batch, train, &opt, step, &mut rng)?;
        learner = next;
        opt = next_opt;
        if let Some(h) = holdout {
            if (step + 1) % cfg.eval_every == 0 || step + 1 == train.steps {
                let (i2t, t2i) = evaluate(&learner, &h.inputs)?;
                m.eval_i2t_top1 = Some(i2t);
                m.eval_t2i_top1 = Some(t2i);
            }
        }
        metrics.push(m);
    }
    Ok((
        RunRecord {
            name: name.to_string(),
            metrics,
        },
        learner,
    ))
}

struct RunPlan {
    name: &'static str,
    policy: SelectionPolicy,
    method: ScoringMethod,
    flexi: bool,
    filtered: bool,
}

fn plans(scenario: Scenario) -> Vec<RunPlan> {
    let plan = |name, policy, method| RunPlan {
        name,
        policy,
        method,
        flexi: false,
        filtered: false,
    };
    let iid = plan("iid", SelectionPolicy::Uniform, ScoringMethod::Learnability);
    let joint = |name, method| plan(name, SelectionPolicy::Joint, method);
    match scenario {
        Scenario::IidBaseline => vec![iid],
        Scenario::Jest => vec![iid, joint("jest", ScoringMethod::Learnability)],
        Scenario::FlexiJest => vec![
            iid,
            RunPlan {
                flexi: true,
                ..joint("flexi_jest", ScoringMethod::Learnability)
            },
        ],
        Scenario::EasyRef => vec![iid, joint("easy_ref", ScoringMethod::EasyRef)],
        Scenario::HardLearner => vec![iid, joint("hard_learner", ScoringMethod::HardLearner)],
        Scenario::Independent => vec![
            iid,
            plan(
                "independent",
                SelectionPolicy::Independent,
                ScoringMethod::Learnability,
            ),
        ],
        Scenario::RawVsFiltered => vec![
            iid,
            joint("jest_raw", ScoringMethod::Learnability),
            RunPlan {
                filtered: true,
                ..joint("jest_filtered", ScoringMethod::Learnability)
            },
        ],
    }
}

/// Runs every learner of the scenario. The first run is always the IID
/// baseline the others are compared against.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    data: &SyntheticDataset,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let scenario = cfg.scenario.as_str();
    let reference = train_reference(cfg, &data.curated)
        .map_err(|e| e.context(format!("{scenario}: training the reference")))?;
    let cache = build_cache(&reference, &data.uncurated)?;
    let all_rows: Vec<usize> = (0..data.uncurated.len()).collect();
    let learner_init = init_params(cfg, LEARNER_SALT)?;

    let mut runs = Vec::new();
    for plan in plans(cfg.scenario) {
        let mut train = cfg.run_config(plan.policy);
        train.selection.method = plan.method;
        if plan.policy != SelectionPolicy::Uniform {
            if plan.flexi {
                train.flop_scheme = FlopScheme::FlexiJest;
                train.approx_scoring = true;
            } else {
                train.flop_scheme = FlopScheme::Jest;
                train.approx_fraction = 0.0;
                train.approx_scoring = false;
            }
        }
        let rows = if plan.filtered {
            filter_by_reference(&cache, cfg.filter_keep)?
        } else {
            all_rows.clone()
        };
        let (record, _) = run_learner(
            plan.name,
            cfg,
            &train,
            &data.uncurated,
            &rows,
            Some(&cache),
            Some(&data.holdout),
            learner_init.clone(),
            LEARNER_SALT,
        )
        .map_err(|e| e.context(format!("{scenario}: run {}", plan.name)))?;
        runs.push(record);
    }

    let baseline = final_smoothed(&runs[0].eval_curve()).ok_or(Error::InvalidArgument(
        "baseline run recorded no evaluations".into(),
    ))?;
    let summaries = runs
        .iter()
        .map(|r| {
            let curve = r.eval_curve();
            let steps_to_baseline = steps_to_reach(&curve, baseline);
            RunSummary {
                run: r.name.clone(),
                final_i2t: final_smoothed(&curve).unwrap_or(f64::NAN),
                final_t2i: final_smoothed(&r.eval_t2i_curve()).unwrap_or(f64::NAN),
                steps: r.metrics.len(),
                steps_to_baseline,
                flops_to_baseline: steps_to_baseline.map(|s| r.metrics[s - 1].cumulative_flops),
            }
        })
        .collect::<Vec<_>>();
    Ok(ExperimentOutcome {
        metrics_csv: metrics_csv(cfg.seed, &runs)?,
        summary_csv: summary_csv(&summaries)?,
        runs,
        summaries,
    })
}

/// Generates the data and runs the scenario.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let data = generate_dataset(&cfg.dataset)
        .map_err(|e| e.context(format!("{}: generating data", cfg.scenario.as_str())))?;
    run_experiment_on(cfg, &data)
}

/// Runs the scenario and writes `metrics.csv` and `summary.csv` under
/// `out_dir`.
pub fn run_experiment_to(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let outcome = run_experiment(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, body) in [
        ("metrics.csv", &outcome.metrics_csv),
        ("summary.csv", &outcome.summary_csv),
    ] {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

fn opt_float(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn finite_or_empty(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Csv {
        line: 0,
        reason: e.to_string(),
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(csv_error)?;
    String::from_utf8(bytes).map_err(csv_error)
}

/// One row per step of every run.
pub fn metrics_csv(seed: u64, runs: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_error)?;
    for r in runs {
        for m in &r.metrics {
            w.write_record([
                r.name.clone(),
                seed.to_string(),
                m.step.to_string(),
                m.loss.to_string(),
                finite_or_empty(m.mean_selected_score),
                opt_float(m.eval_i2t_top1),
                opt_float(m.eval_t2i_top1),
                m.cumulative_flops.to_string(),
                m.skipped.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    finish(w)
}

pub fn summary_csv(summaries: &[RunSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS).map_err(csv_error)?;
    for s in summaries {
        w.write_record([
            s.run.clone(),
            finite_or_empty(s.final_i2t),
            finite_or_empty(s.final_t2i),
            s.steps.to_string(),
            s.steps_to_baseline
                .map(|v| v.to_string())
                .unwrap_or_default(),
            opt_float(s.flops_to_baseline),
        ])
        .map_err(csv_error)?;
    }
    finish(w)
}
