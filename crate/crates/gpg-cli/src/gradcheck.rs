//! The `gradcheck` subcommand: analytic gradients of the configured loss
//! against central finite differences on random policies and batches.

use clap::Args;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use gpg_core::advantage::{batch_stats, compute_advantages, AdvantageSpec, NormMode, RolloutGroup};
use gpg_core::losses::{surrogate_loss, Algorithm, LossConfig};
use gpg_core::policy::{finite_diff_grad, grad_loss, refresh_logp_cur, PolicyParams};
use gpg_core::rng::substream;
use gpg_core::trainer::build_token_batch;

use crate::{parse_algorithm, CliError};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random (policy, batch) instances to check.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Maximum allowed relative error on coordinates above the magnitude floor.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Loss to differentiate (gpg | grpo | dr-grpo | ppo-clip | dapo).
    #[arg(long, default_value = "gpg")]
    pub loss: String,
    /// Central-difference step size.
    #[arg(long = "fd-step", default_value_t = 1e-5)]
    pub fd_step: f64,
}

/// Coordinates with analytic magnitude at or below this floor are skipped
/// when forming relative errors.
const MAGNITUDE_FLOOR: f64 = 1e-8;

fn random_instance(rng: &mut ChaCha8Rng) -> (PolicyParams, Vec<RolloutGroup>) {
    let contexts = rng.gen_range(1..=3);
    let positions = rng.gen_range(1..=3);
    let vocab = rng.gen_range(2..=4);
    let policy = PolicyParams::random(contexts, positions, vocab, 1.0, rng);
    let n_groups = rng.gen_range(2..=4);
    let mut groups = Vec::new();
    for g in 0..n_groups {
        let ctx = rng.gen_range(0..contexts);
        let size = rng.gen_range(2..=5);
        let responses: Vec<Vec<u32>> = (0..size)
            .map(|_| {
                let len = rng.gen_range(1..=positions);
                (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
            })
            .collect();
        let mut rewards: Vec<f64> =
            (0..size).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        if g == 0 {
            rewards = vec![1.0; size]; // keep a degenerate group in play
        } else if rewards.iter().all(|&r| r == rewards[0]) {
            rewards[0] = 1.0 - rewards[0];
        }
        groups.push(RolloutGroup::new(ctx, responses, rewards).unwrap());
    }
    (policy, groups)
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(CliError::Config(format!(
            "tolerance must be positive, got {}",
            args.tolerance
        )));
    }
    if args.fd_step.is_nan() || args.fd_step <= 0.0 {
        return Err(CliError::Config(format!(
            "fd-step must be positive, got {}",
            args.fd_step
        )));
    }
    if args.seeds == 0 {
        return Err(CliError::Config("need at least one seed".into()));
    }
    let algorithm = parse_algorithm(&args.loss)?;
    let cfg = LossConfig {
        algorithm,
        kl_beta: if algorithm == Algorithm::Grpo { 0.04 } else { 0.0 },
        ..LossConfig::default()
    };

    let mut worst: f64 = 0.0;
    let mut total_coords = 0usize;
    for seed in 0..args.seeds as u64 {
        let mut rng = substream(seed, "gradcheck");
        let (policy, groups) = random_instance(&mut rng);
        let mode = [NormMode::Unit, NormMode::GroupStd, NormMode::BatchStd][seed as usize % 3];
        let advantages =
            compute_advantages(&groups, &AdvantageSpec { mode, epsilon: 1e-8 }).unwrap();
        let alpha = if algorithm == Algorithm::Gpg {
            batch_stats(&groups).map_err(|e| CliError::Runtime(e.to_string()))?.alpha
        } else {
            1.0
        };
        let with_old = algorithm != Algorithm::Gpg;
        let ref_policy = (cfg.kl_beta > 0.0).then(|| {
            PolicyParams::random(policy.contexts(), policy.positions(), policy.vocab(), 1.0, &mut rng)
        });
        let batch = build_token_batch(
            &policy,
            &groups,
            &advantages,
            alpha,
            with_old,
            ref_policy.as_ref(),
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;

        let analytic =
            grad_loss(&policy, &batch, &cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        let fd = finite_diff_grad(
            |p| {
                let refreshed = refresh_logp_cur(p, &batch).expect("same shape");
                surrogate_loss(&refreshed, &cfg).expect("valid batch")
            },
            &policy,
            args.fd_step,
        );

        let mut seed_worst: f64 = 0.0;
        let mut coords = 0usize;
        for i in 0..analytic.len() {
            let (a, f) = (analytic.data()[i], fd.data()[i]);
            if a.abs() > MAGNITUDE_FLOOR {
                seed_worst = seed_worst.max(((a - f) / a).abs());
                coords += 1;
            }
        }
        println!("seed {seed}: worst relative error {seed_worst:.3e} over {coords} coordinates");
        worst = worst.max(seed_worst);
        total_coords += coords;
    }

    println!(
        "gradcheck [{}]: worst relative error {worst:.3e} over {total_coords} coordinates \
         ({} instances, fd step {})",
        args.loss, args.seeds, args.fd_step
    );
    if worst < args.tolerance {
        println!("gradcheck PASS (tolerance {})", args.tolerance);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradcheck FAIL: worst relative error {worst:.3e} exceeds tolerance {}",
            args.tolerance
        )))
    }
}
