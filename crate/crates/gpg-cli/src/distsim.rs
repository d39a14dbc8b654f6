//! The `distsim` subcommand: build worker shards with invalid samples and
//! verify the distributed-averaging identity over the requested trials.

use clap::Args;
use rand::Rng;

use gpg_core::distsim::{verify_identity, DistsimError, WorkerShard};
use gpg_core::rng::substream;

use crate::CliError;

#[derive(Debug, Args)]
pub struct DistsimArgs {
    /// Number of workers (N).
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Samples assigned to each worker (K).
    #[arg(long = "per-worker", default_value_t = 4)]
    pub per_worker: usize,
    /// Invalid-sample pattern: "random", a total count, or a per-worker
    /// comma list like "1,0,2".
    #[arg(long, default_value = "random")]
    pub invalid: String,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gradient vector dimension.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Use all-ones gradients instead of random ones.
    #[arg(long)]
    pub unit_gradients: bool,
}

enum InvalidSpec {
    Random,
    Total(usize),
    PerWorker(Vec<usize>),
}

fn parse_invalid(raw: &str, workers: usize, per_worker: usize) -> Result<InvalidSpec, CliError> {
    let total = workers * per_worker;
    if raw == "random" {
        return Ok(InvalidSpec::Random);
    }
    if raw.contains(',') {
        let counts: Vec<usize> = raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad invalid count {s:?}")))
            })
            .collect::<Result<_, _>>()?;
        if counts.len() != workers {
            return Err(CliError::Config(format!(
                "invalid list has {} entries for {workers} workers",
                counts.len()
            )));
        }
        if let Some(bad) = counts.iter().find(|&&m| m > per_worker) {
            return Err(CliError::Config(format!(
                "worker invalid count {bad} exceeds per-worker {per_worker}"
            )));
        }
        if counts.iter().sum::<usize>() == total {
            return Err(CliError::Config(
                "every sample is invalid (S = 0); nothing to average".into(),
            ));
        }
        return Ok(InvalidSpec::PerWorker(counts));
    }
    let m: usize = raw
        .parse()
        .map_err(|_| CliError::Config(format!("bad invalid spec {raw:?}")))?;
    if m >= total {
        return Err(CliError::Config(format!(
            "{m} invalid of {total} samples leaves no valid gradient (S = 0)"
        )));
    }
    Ok(InvalidSpec::Total(m))
}

pub fn cmd_distsim(args: DistsimArgs) -> Result<(), CliError> {
    if args.workers == 0 || args.per_worker == 0 {
        return Err(CliError::Config("need workers >= 1 and per-worker >= 1".into()));
    }
    if args.dim == 0 {
        return Err(CliError::Config("need dim >= 1".into()));
    }
    if args.trials == 0 {
        return Err(CliError::Config("need trials >= 1".into()));
    }
    let spec = parse_invalid(&args.invalid, args.workers, args.per_worker)?;
    let mut rng = substream(args.seed, "distsim");

    let mut passed = 0usize;
    let mut ratio_lo = f64::INFINITY;
    let mut ratio_hi = f64::NEG_INFINITY;
    for trial in 0..args.trials {
        let per_worker_invalid: Vec<usize> = match &spec {
            InvalidSpec::PerWorker(counts) => counts.clone(),
            InvalidSpec::Total(m) => {
                // Deal the m invalid slots over workers uniformly.
                let mut counts = vec![0usize; args.workers];
                let mut remaining = *m;
                while remaining > 0 {
                    let w = rng.gen_range(0..args.workers);
                    if counts[w] < args.per_worker {
                        counts[w] += 1;
                        remaining -= 1;
                    }
                }
                counts
            }
            InvalidSpec::Random => loop {
                let counts: Vec<usize> = (0..args.workers)
                    .map(|_| rng.gen_range(0..=args.per_worker))
                    .collect();
                if counts.iter().sum::<usize>() < args.workers * args.per_worker {
                    break counts;
                }
            },
        };
        let shards: Vec<WorkerShard> = per_worker_invalid
            .iter()
            .map(|&m| {
                let grads = (0..args.per_worker - m)
                    .map(|_| {
                        (0..args.dim)
                            .map(|_| {
                                if args.unit_gradients {
                                    1.0
                                } else {
                                    rng.gen_range(-5.0..5.0)
                                }
                            })
                            .collect()
                    })
                    .collect();
                WorkerShard::new(args.per_worker, grads).expect("counts validated")
            })
            .collect();

        match verify_identity(&shards) {
            Ok(report) => {
                ratio_lo = ratio_lo.min(report.ratio);
                ratio_hi = ratio_hi.max(report.ratio);
                passed += 1;
                println!(
                    "trial {trial}: N={} K={} M={} S/B={} pass",
                    args.workers,
                    args.per_worker,
                    report.total - report.valid,
                    report.ratio
                );
            }
            Err(DistsimError::IdentityViolation {
                scaled_dev,
                corrected_dev,
                naive_avg,
                true_avg,
            }) => {
                eprintln!(
                    "trial {trial}: IDENTITY VIOLATION\n  max |naive - true*(S/B)| = {scaled_dev:e}\n  max |alpha*naive - true| = {corrected_dev:e}\n  naive = {naive_avg:?}\n  true  = {true_avg:?}"
                );
                return Err(CliError::Runtime(format!(
                    "identity violated on trial {trial}"
                )));
            }
            Err(e) => return Err(CliError::Runtime(e.to_string())),
        }
    }
    println!(
        "{passed}/{} trials passed; observed S/B in [{ratio_lo}, {ratio_hi}]",
        args.trials
    );
    Ok(())
}
