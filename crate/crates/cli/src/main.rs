use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use jest_core::flops::{ratio_flexi, ratio_jest};
use jest_core::harness::synthetic::learnability_scores;
use jest_core::harness::{emit_plots, load_config, run_experiment_to, Scenario};
use jest_core::sampler::{independent_sample, jointly_sample_sigmoid, uniform_select};
use jest_core::{ContrastiveParams, Error, SelectionConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Joint example selection experiments on synthetic data.
#[derive(Parser)]
#[command(name = "curate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed of the experiment and its data.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the samplers on a synthetic learnability matrix.
    SampleBench {
        #[arg(long, value_parser = ["0.5", "0.8", "0.9"])]
        ratio: String,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        chunks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-step cost of a scenario relative to an IID step.
    Flops {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        f: f64,
        #[arg(long = "A", default_value_t = jest_core::flops::DEFAULT_APPROX_FLOPS)]
        approx: f64,
    },
    /// Render SVG curves from a metrics CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Rejected user input; reported with the config-error exit code.
fn usage(e: Error) -> Error {
    if e.is_config() {
        e
    } else {
        Error::Config {
            line: 0,
            reason: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(&config).map_err(usage)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let outcome = run_experiment_to(&cfg, &out_dir)?;
            print!("{}", outcome.summary_csv);
            println!("wrote {}", out_dir.display());
        }
        Command::SampleBench {
            ratio,
            size,
            chunks,
            seed,
        } => {
            let cfg = SelectionConfig {
                n_chunks: chunks,
                filter_ratio: ratio.parse().expect("restricted by clap"),
                ..Default::default()
            };
            let b = cfg.sub_batch_size(size).map_err(usage)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores = learnability_scores(
                size,
                16,
                0.5,
                0.3,
                &ContrastiveParams::default(),
                cfg.gain,
                &mut rng,
            )?;
            println!("super_batch={size} sub_batch={b} chunks={chunks}");
            let start = Instant::now();
            let joint = jointly_sample_sigmoid(&scores, &cfg, &mut rng)?;
            let t_joint = start.elapsed();
            let start = Instant::now();
            let indep = independent_sample(&scores, &cfg, &mut rng)?;
            let t_indep = start.elapsed();
            let start = Instant::now();
            let uniform = uniform_select(&scores, &cfg, &mut rng)?;
            let t_uniform = start.elapsed();
            for (name, sel, t) in [
                ("joint", &joint, t_joint),
                ("independent", &indep, t_indep),
                ("uniform", &uniform, t_uniform),
            ] {
                println!(
                    "{name}: joint_score={} seconds={}",
                    sel.joint_score,
                    t.as_secs_f64()
                );
            }
        }
        Command::Flops {
            scenario,
            f,
            approx,
        } => {
            let scenario: Scenario = scenario.parse().map_err(usage)?;
            let ratio = match scenario {
                Scenario::IidBaseline => 1.0,
                Scenario::FlexiJest => ratio_flexi(f, approx).map_err(usage)?,
                _ => ratio_jest(f).map_err(usage)?,
            };
            println!("scenario={}", scenario.as_str());
            println!("filter_ratio={f}");
            if scenario == Scenario::FlexiJest {
                println!("approx_factor={approx}");
            }
            println!("cost_relative_to_iid={ratio}");
        }
        Command::Plot { csv, out } => {
            for path in emit_plots(&csv, &out)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
