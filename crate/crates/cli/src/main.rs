use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use nets_cli::{run_benchmark, run_sample, run_train, suite_config, ExperimentConfig, SampleOverrides};

#[derive(Parser)]
#[command(name = "nets", version, about = "Train and run non-equilibrium transport samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `train.iterations=200`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured network and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample with a checkpoint (or the configured analytic/zero drift) and report metrics.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Constant diffusion at sample time.
        #[arg(long)]
        eps: Option<f64>,
        /// Integration steps at sample time.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run a benchmark suite: gmm, funnel, mos, phi4-free or phi4-critical.
    Benchmark {
        suite: String,
        /// Use this config instead of the suite's built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config and print its resolved form.
    ValidateConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, out } => {
            let cfg = common.load()?;
            let outcome = run_train(&cfg, &out)?;
            let r = &outcome.evaluation.report;
            println!("terminal ess {:.4}  log Z {:.4} ± {:.4}", r.terminal_ess, r.log_z, r.log_z_se);
        }
        Command::Sample { common, checkpoint, out, eps, steps } => {
            let mut cfg = common.load()?;
            SampleOverrides { eps, steps }.apply(&mut cfg);
            let e = run_sample(&cfg, checkpoint.as_deref(), &out)?;
            let r = &e.report;
            println!("terminal ess {:.4}  log Z {:.4} ± {:.4}", r.terminal_ess, r.log_z, r.log_z_se);
        }
        Command::Benchmark { suite, config, seed, mut overrides, out } => {
            if let Some(seed) = seed {
                overrides.push(format!("seed={seed}"));
            }
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path, &overrides)?,
                None => ExperimentConfig::parse(suite_config(&suite)?, &overrides)?,
            };
            for (name, r) in run_benchmark(&cfg, &out)? {
                println!("{name:>20}  ess {:.4}  log Z {:.4} ± {:.4}", r.terminal_ess, r.log_z, r.log_z_se);
            }
        }
        Command::ValidateConfig { common } => {
            let cfg = common.load()?;
            print!("{}", cfg.resolved()?);
        }
    }
    Ok(())
}
