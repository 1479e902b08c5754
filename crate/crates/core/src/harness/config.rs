//! Experiment configuration files.
//!
//! ```text
//! # comment
//! [experiment]
//! scenario = jest
//! seed = 3
//!
//! [train]
//! filter_ratio = 0.8
//! ```
//!
//! Sections are `experiment`, `reference`, `dataset` and `train`. Keys left
//! out keep their defaults; unknown sections or keys, repeated keys and
//! unparsable values are errors that carry the 1-based line number.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::contrastive::LossKind;
use crate::error::{Error, Result};
use crate::harness::dataset::SyntheticDatasetSpec;
use crate::scoring::ScoringMethod;
use crate::trainer::{ApproxKind, FlopScheme, SelectionPolicy, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    IidBaseline,
    Jest,
    FlexiJest,
    EasyRef,
    HardLearner,
    Independent,
    RawVsFiltered,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::IidBaseline,
        Scenario::Jest,
        Scenario::FlexiJest,
        Scenario::EasyRef,
        Scenario::HardLearner,
        Scenario::Independent,
        Scenario::RawVsFiltered,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::IidBaseline => "iid_baseline",
            Scenario::Jest => "jest",
            Scenario::FlexiJest => "flexi_jest",
            Scenario::EasyRef => "easy_ref",
            Scenario::HardLearner => "hard_learner",
            Scenario::Independent => "independent",
            Scenario::RawVsFiltered => "raw_vs_filtered",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario {s:?}")))
    }
}

/// How the reference model is trained on the curated set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            steps: 400,
            batch_size: 64,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Evaluate on the holdout every this many steps (and at the last step).
    pub eval_every: usize,
    pub embed_dim: usize,
    /// Fraction of the uncurated set kept by the reference-alignment filter
    /// in the raw-vs-filtered scenario.
    pub filter_keep: f64,
    pub reference: ReferenceConfig,
    pub dataset: SyntheticDatasetSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            steps: 400,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            scenario: Scenario::Jest,
            seed: 0,
            output_dir: PathBuf::from("out"),
            eval_every: 10,
            embed_dim: 16,
            filter_keep: 0.5,
            reference: ReferenceConfig::default(),
            dataset: SyntheticDatasetSpec::default(),
            train,
        }
    }
}

impl ExperimentConfig {
    /// Sets the seed of the whole experiment, data included.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self
    }

    /// Training configuration for a run of `policy` under this experiment.
    pub fn run_config(&self, policy: SelectionPolicy) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.policy = policy;
        if policy == SelectionPolicy::Uniform {
            cfg.super_batch = cfg.sub_batch;
            cfg.approx_fraction = 0.0;
            cfg.approx_scoring = false;
            cfg.flop_scheme = FlopScheme::Iid;
        }
        cfg.selection.seed = self.seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.eval_every == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "eval_every and embed_dim must be at least 1".into(),
            ));
        }
        if self.reference.steps == 0
            || self.reference.batch_size == 0
            || self.reference.batch_size > self.dataset.curated_size
        {
            return Err(Error::InvalidArgument(format!(
                "reference needs at least one step and 0 < batch_size <= curated_size ({})",
                self.dataset.curated_size
            )));
        }
        if self.train.steps == 0 {
            return Err(Error::InvalidArgument(
                "train.steps must be at least 1".into(),
            ));
        }
        self.run_config(SelectionPolicy::Uniform).validate()?;
        if self.scenario != Scenario::IidBaseline {
            self.run_config(SelectionPolicy::Joint).validate()?;
        }
        match self.scenario {
            Scenario::FlexiJest if self.train.approx_fraction == 0.0 => {
                return Err(Error::InvalidArgument(
                    "flexi_jest needs approx_fraction > 0".into(),
                ));
            }
            Scenario::RawVsFiltered
                if !(self.filter_keep > 0.0 && self.filter_keep <= 1.0)
                    || ((self.dataset.uncurated_size as f64 * self.filter_keep) as usize)
                        < self.train.super_batch =>
            {
                return Err(Error::InvalidArgument(format!(
                    "filter_keep {} must lie in (0, 1] and keep at least one super-batch",
                    self.filter_keep
                )));
            }
            _ => {}
        }
        if self.train.super_batch > self.dataset.uncurated_size {
            return Err(Error::InvalidArgument(format!(
                "super-batch {} exceeds the uncurated set of {}",
                self.train.super_batch, self.dataset.uncurated_size
            )));
        }
        Ok(())
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Config {
        line,
        reason: format!("bad value {value:?} for {key}: {e}"),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config {
            line,
            reason: format!("bad value {value:?} for {key}: expected true or false"),
        }),
    }
}

fn parse_with<T>(
    line: usize,
    key: &str,
    value: &str,
    f: impl FnOnce(&str) -> Result<T>,
) -> Result<T> {
    f(value).map_err(|e| Error::Config {
        line,
        reason: format!("bad value {value:?} for {key}: {e}"),
    })
}

fn parse_approx_kind(s: &str) -> Result<ApproxKind> {
    match s {
        "coarsen" => Ok(ApproxKind::Coarsen),
        "feature_drop" => Ok(ApproxKind::FeatureDrop),
        _ => Err(Error::InvalidArgument(
            "expected coarsen or feature_drop".into(),
        )),
    }
}

fn apply(
    cfg: &mut ExperimentConfig,
    section: &str,
    key: &str,
    value: &str,
    line: usize,
) -> Result<()> {
    let unknown = || Error::Config {
        line,
        reason: format!("unknown key {key:?} in [{section}]"),
    };
    match section {
        "experiment" => match key {
            "scenario" => cfg.scenario = parse_with(line, key, value, Scenario::from_str)?,
            "seed" => {
                let seed = parse_value(line, key, value)?;
                cfg.seed = seed;
                cfg.dataset.seed = seed;
            }
            "output_dir" => cfg.output_dir = PathBuf::from(value),
            "eval_every" => cfg.eval_every = parse_value(line, key, value)?,
            "embed_dim" => cfg.embed_dim = parse_value(line, key, value)?,
            "filter_keep" => cfg.filter_keep = parse_value(line, key, value)?,
            _ => return Err(unknown()),
        },
        "reference" => match key {
            "steps" => cfg.reference.steps = parse_value(line, key, value)?,
            "batch_size" => cfg.reference.batch_size = parse_value(line, key, value)?,
            "learning_rate" => cfg.reference.learning_rate = parse_value(line, key, value)?,
            _ => return Err(unknown()),
        },
        "dataset" => {
            let d = &mut cfg.dataset;
            match key {
                "latent_dim" => d.latent_dim = parse_value(line, key, value)?,
                "input_dim" => d.input_dim = parse_value(line, key, value)?,
                "n_concepts" => d.n_concepts = parse_value(line, key, value)?,
                "noise_rate" => d.noise_rate = parse_value(line, key, value)?,
                "curated_size" => d.curated_size = parse_value(line, key, value)?,
                "uncurated_size" => d.uncurated_size = parse_value(line, key, value)?,
                "holdout_size" => d.holdout_size = parse_value(line, key, value)?,
                "concept_spread" => d.concept_spread = parse_value(line, key, value)?,
                "input_noise" => d.input_noise = parse_value(line, key, value)?,
                "seed" => d.seed = parse_value(line, key, value)?,
                _ => return Err(unknown()),
            }
        }
        "train" => {
            let t = &mut cfg.train;
            match key {
                "steps" => t.steps = parse_value(line, key, value)?,
                "super_batch" => t.super_batch = parse_value(line, key, value)?,
                "sub_batch" => t.sub_batch = parse_value(line, key, value)?,
                "n_chunks" => t.selection.n_chunks = parse_value(line, key, value)?,
                "filter_ratio" => t.selection.filter_ratio = parse_value(line, key, value)?,
                "method" => {
                    t.selection.method = parse_with(line, key, value, ScoringMethod::from_str)?
                }
                "gain" => t.selection.gain = parse_value(line, key, value)?,
                "loss" => t.loss = parse_with(line, key, value, LossKind::from_str)?,
                "approx_fraction" => t.approx_fraction = parse_value(line, key, value)?,
                "approx_factor" => t.approx_factor = parse_value(line, key, value)?,
                "approx_kind" => t.approx_kind = parse_with(line, key, value, parse_approx_kind)?,
                "approx_scoring" => t.approx_scoring = parse_bool(line, key, value)?,
                "learning_rate" => t.learning_rate = parse_value(line, key, value)?,
                "warmup_fraction" => t.warmup_fraction = parse_value(line, key, value)?,
                "adam_beta1" => t.adam.beta1 = parse_value(line, key, value)?,
                "adam_beta2" => t.adam.beta2 = parse_value(line, key, value)?,
                "adam_eps" => t.adam.eps = parse_value(line, key, value)?,
                "weight_decay" => t.adam.weight_decay = parse_value(line, key, value)?,
                "grad_clip_norm" => {
                    t.adam.grad_clip_norm = match value {
                        "none" => None,
                        v => Some(parse_value(line, key, v)?),
                    }
                }
                _ => return Err(unknown()),
            }
        }
        _ => unreachable!("sections are checked when read"),
    }
    Ok(())
}

const SECTIONS: [&str; 4] = ["experiment", "reference", "dataset", "train"];

/// Parses a configuration, starting from [`ExperimentConfig::default`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<&str> = None;
    let mut seen: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                line,
                reason: format!("unterminated section header {content:?}"),
            })?;
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Config {
                    line,
                    reason: format!("unknown section [{name}]"),
                });
            }
            section = Some(
                SECTIONS
                    .iter()
                    .copied()
                    .find(|s| *s == name)
                    .expect("checked"),
            );
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            reason: format!("expected key = value, found {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section.ok_or_else(|| Error::Config {
            line,
            reason: format!("key {key:?} appears before any section header"),
        })?;
        let id = (sec.to_string(), key.to_string());
        if seen.contains(&id) {
            return Err(Error::Config {
                line,
                reason: format!("duplicate key {key:?} in [{sec}]"),
            });
        }
        seen.push(id);
        apply(&mut cfg, sec, key, value, line)?;
    }
    cfg.validate().map_err(|e| Error::Config {
        line: 0,
        reason: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| e.context(format!("in {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn values_are_applied() {
        let cfg = parse_config(
            "# demo\n[experiment]\nscenario = easy_ref\nseed = 7\n\n[train]\nmethod = easy_ref\ngrad_clip_norm = none\napprox_kind = feature_drop  # trailing\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario, Scenario::EasyRef);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.seed, 7);
        assert_eq!(cfg.train.selection.method, ScoringMethod::EasyRef);
        assert_eq!(cfg.train.adam.grad_clip_norm, None);
        assert_eq!(cfg.train.approx_kind, ApproxKind::FeatureDrop);
    }

    fn line_of(text: &str) -> usize {
        match parse_config(text).unwrap_err() {
            Error::Config { line, .. } => line,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of("[experiment]\nseed = x\n"), 2);
        assert_eq!(line_of("\n\n[nope]\n"), 3);
        assert_eq!(line_of("[train]\nsteps = 3\nsteps = 4\n"), 3);
        assert_eq!(line_of("seed = 1\n"), 1);
        assert_eq!(line_of("[train]\nbogus = 1\n"), 2);
        assert_eq!(line_of("[train\n"), 1);
        assert_eq!(line_of("[train]\njust a line\n"), 2);
        assert_eq!(line_of("[experiment]\nscenario = fastest\n"), 2);
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let err = parse_config("[train]\nsub_batch = 33\n").unwrap_err();
        assert!(err.is_config());
        let err = parse_config("[experiment]\nscenario = flexi_jest\n").unwrap_err();
        assert!(err.is_config());
    }
}
