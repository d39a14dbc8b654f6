//! The `train` subcommand: load and validate the experiment config, run
//! one seed (or a sweep), and write metrics, checkpoints, and the resolved
//! config snapshot.

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::Args;

use gpg_core::trainer::run;

use crate::config::ExperimentConfig;
use crate::sinks::{write_csv, write_jsonl, write_summary, SummaryRow};
use crate::{parse_algorithm, CliError};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "GPGLAB_OUT_DIR";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML experiment config; defaults apply for anything omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.optimizer.learning_rate=0.05
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run a single seed (disables any configured sweep).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override train.total_steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override train.loss.algorithm (gpg | grpo | dr-grpo | ppo-clip | dapo).
    #[arg(long)]
    pub algo: Option<String>,
    /// Output directory; beats both the config and GPGLAB_OUT_DIR.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut cfg =
        ExperimentConfig::from_toml(&text, &args.set).map_err(|e| CliError::Config(e.0))?;

    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.seeds = None;
    }
    if let Some(steps) = args.steps {
        cfg.train.total_steps = steps;
    }
    if let Some(algo) = &args.algo {
        cfg.train.loss.algorithm = parse_algorithm(algo)?;
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        cfg.output.dir = PathBuf::from(dir);
    }
    if let Some(dir) = &args.out_dir {
        cfg.output.dir = dir.clone();
    }
    cfg.validate().map_err(|e| CliError::Config(e.0))?;

    let out = &cfg.output.dir;
    fs::create_dir_all(out)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    let snapshot = cfg.to_resolved_toml().map_err(|e| CliError::Config(e.0))?;
    fs::write(out.join("config.resolved.toml"), snapshot)
        .map_err(|e| CliError::Runtime(format!("cannot write resolved config: {e}")))?;

    let seeds = cfg.run_seeds();
    let mut summary = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let result = run(train_cfg)
            .map_err(|e| CliError::Runtime(format!("seed {seed}: {e}")))?;

        if cfg.output.formats.csv() {
            let path = out.join(format!("metrics_seed{seed}.csv"));
            write_csv(&path, &result.metrics)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        if cfg.output.formats.jsonl() {
            let path = out.join(format!("metrics_seed{seed}.jsonl"));
            write_jsonl(&path, &result.metrics)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        let ckpt_path = out.join(format!("policy_seed{seed}.txt"));
        let file = fs::File::create(&ckpt_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", ckpt_path.display())))?;
        result
            .policy
            .save_checkpoint(BufWriter::new(file))
            .map_err(|e| CliError::Runtime(format!("{}: {e}", ckpt_path.display())))?;

        let last = result.metrics.last();
        let mean_alpha = if result.metrics.is_empty() {
            f64::NAN
        } else {
            result.metrics.iter().map(|r| r.alpha).sum::<f64>() / result.metrics.len() as f64
        };
        println!(
            "seed {seed}: {} steps, final mean reward {}, wrote {}",
            result.metrics.len(),
            last.map_or("n/a".to_string(), |r| r.mean_reward.to_string()),
            out.display()
        );
        summary.push(SummaryRow {
            seed,
            steps: result.metrics.len(),
            final_mean_reward: last.map_or(f64::NAN, |r| r.mean_reward),
            final_loss: last.map_or(f64::NAN, |r| r.loss),
            mean_alpha,
        });
    }

    if seeds.len() > 1 {
        let path = out.join("summary.csv");
        write_summary(&path, &summary)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        println!("sweep of {} seeds summarized in {}", seeds.len(), path.display());
    }
    Ok(())
}
