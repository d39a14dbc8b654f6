//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the numbers it verified. Criterion 9 (byte-identical CLI metrics)
//! lives in the CLI crate's acceptance target, next to the binary it runs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gpg_core::advantage::{batch_stats, compute_advantages, AdvantageSpec, NormMode, RolloutGroup};
use gpg_core::distsim::{naive_average, true_average, verify_identity, WorkerShard};
use gpg_core::envs::EnvConfig;
use gpg_core::losses::{gpg_loss, kl_k3, Algorithm, LossConfig, TokenBatch};
use gpg_core::policy::{
    finite_diff_grad, grad_logprob_weighted, grad_loss, refresh_logp_cur, OptKind,
    OptimizerConfig, PolicyParams, Table,
};
use gpg_core::trainer::{build_token_batch, run, TrainConfig, Trainer};

// ---------------------------------------------------------------------------
// helpers

fn random_policy(rng: &mut ChaCha8Rng) -> PolicyParams {
    let contexts = rng.gen_range(1..=3);
    let positions = rng.gen_range(1..=3);
    let vocab = rng.gen_range(2..=4);
    PolicyParams::random(contexts, positions, vocab, 1.0, rng)
}

/// Random rollout groups over `policy`'s shape; binary rewards, with a
/// forced degenerate group when requested.
fn random_groups(
    policy: &PolicyParams,
    rng: &mut ChaCha8Rng,
    force_degenerate: bool,
) -> Vec<RolloutGroup> {
    let n_groups = rng.gen_range(2..=4);
    let mut groups = Vec::new();
    for g in 0..n_groups {
        let ctx = rng.gen_range(0..policy.contexts());
        let size = rng.gen_range(2..=5);
        let responses: Vec<Vec<u32>> = (0..size)
            .map(|_| {
                let len = rng.gen_range(1..=policy.positions());
                (0..len)
                    .map(|_| rng.gen_range(0..policy.vocab() as u32))
                    .collect()
            })
            .collect();
        let rewards: Vec<f64> = if force_degenerate && g == 0 {
            vec![1.0; size]
        } else {
            let mut r: Vec<f64> =
                (0..size).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            // Keep at least one valid group in the batch.
            if g == n_groups - 1 && r.iter().all(|&x| x == r[0]) {
                r[0] = 1.0 - r[0];
            }
            r
        };
        groups.push(RolloutGroup::new(ctx, responses, rewards).unwrap());
    }
    groups
}

fn assert_tables_close(a: &Table, b: &Table, rel_tol: f64, what: &str) {
    assert!(a.same_shape(b), "{what}: shape mismatch");
    let scale = a.max_abs().max(b.max_abs());
    for i in 0..a.len() {
        let (x, y) = (a.data()[i], b.data()[i]);
        let denom = x.abs().max(y.abs());
        if denom <= 1e-14 * scale.max(1.0) {
            continue; // both negligible against the table's scale
        }
        assert!(
            ((x - y) / denom).abs() <= rel_tol,
            "{what}: coordinate {i}: {x} vs {y} (rel {})",
            ((x - y) / denom).abs()
        );
    }
}

// ---------------------------------------------------------------------------
// criteria

#[test]
fn criterion_01_distributed_averaging_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    while checked < 100 {
        let n = [1usize, 2, 4, 8][rng.gen_range(0..4)];
        let k = rng.gen_range(1..=16);
        let dim = rng.gen_range(1..=8);
        let shards: Vec<WorkerShard> = (0..n)
            .map(|_| {
                let invalid = rng.gen_range(0..=k);
                let grads = (0..k - invalid)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect())
                    .collect();
                WorkerShard::new(k, grads).unwrap()
            })
            .collect();
        let valid: usize = shards.iter().map(|s| s.gradients.len()).sum();
        if valid == 0 {
            continue; // S >= 1 required
        }
        let total: usize = shards.iter().map(|s| s.assigned).sum();
        let naive = naive_average(&shards).unwrap();
        let truth = true_average(&shards).unwrap();
        let ratio = valid as f64 / total as f64;
        let alpha = total as f64 / valid as f64;
        let dev_scaled = naive
            .iter()
            .zip(&truth)
            .map(|(n, t)| (n - t * ratio).abs())
            .fold(0.0, f64::max);
        let dev_corrected = naive
            .iter()
            .zip(&truth)
            .map(|(n, t)| (alpha * n - t).abs())
            .fold(0.0, f64::max);
        assert!(dev_scaled <= 1e-12, "|naive - true*(S/B)| = {dev_scaled:e}");
        assert!(dev_corrected <= 1e-12, "|alpha*naive - true| = {dev_corrected:e}");
        verify_identity(&shards).unwrap();
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("[PASS] criterion 1: averaging identity on 100 shard configs ({elapsed:?})");
}

#[test]
fn criterion_02_gradient_exactness_vs_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut coords_checked = 0usize;
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let policy = random_policy(&mut rng);
        let groups = random_groups(&policy, &mut rng, trial % 2 == 0);
        let mode = [NormMode::Unit, NormMode::GroupStd, NormMode::BatchStd][trial % 3];
        let spec = AdvantageSpec { mode, epsilon: 1e-8 };
        let advantages = compute_advantages(&groups, &spec).unwrap();
        let alpha = batch_stats(&groups).unwrap().alpha;
        let batch = build_token_batch(&policy, &groups, &advantages, alpha, false, None).unwrap();

        let analytic = grad_logprob_weighted(&policy, &batch).unwrap();
        let fd = finite_diff_grad(
            |p| gpg_loss(&refresh_logp_cur(p, &batch).unwrap()).unwrap(),
            &policy,
            1e-5,
        );
        for i in 0..analytic.len() {
            let (a, f) = (analytic.data()[i], fd.data()[i]);
            if a.abs() > 1e-8 {
                let rel = ((a - f) / a).abs();
                worst = worst.max(rel);
                assert!(rel < 1e-5, "trial {trial} coord {i}: analytic {a} vs fd {f}");
                coords_checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "[PASS] criterion 2: analytic vs finite-difference gradients, \
         {coords_checked} coordinates over 20 policies, worst rel err {worst:.2e} ({elapsed:?})"
    );
}

/// Test-side oracle: gradient of the token-weighted policy-gradient loss
/// `-sum w_it * logp_it * A_i` via the softmax identity, plain loops.
fn weighted_pg_grad_oracle(policy: &PolicyParams, batch: &TokenBatch, grpo_weights: bool) -> Table {
    let mut grad = Table::zeros_like(policy.logits());
    let total_tokens: usize = batch
        .groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|r| r.tokens.len())
        .sum();
    let n_groups = batch.groups.len() as f64;
    for group in &batch.groups {
        let group_size = group.len() as f64;
        for resp in group {
            let w = if grpo_weights {
                1.0 / (n_groups * group_size * resp.tokens.len() as f64)
            } else {
                1.0 / total_tokens as f64
            };
            for (pos, &tok) in resp.tokens.iter().enumerate() {
                let probs = policy.token_probs(resp.context, pos);
                for (j, &p) in probs.iter().enumerate() {
                    let ind = if j == tok as usize { 1.0 } else { 0.0 };
                    grad.add(resp.context, pos, j, -w * resp.advantage * (ind - p));
                }
            }
        }
    }
    grad
}

#[test]
fn criterion_03_surrogate_equivalence_at_sampling_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for instance in 0..10 {
        let policy = random_policy(&mut rng);
        let groups = random_groups(&policy, &mut rng, instance % 2 == 0);
        let spec = AdvantageSpec {
            mode: NormMode::GroupStd,
            epsilon: 1e-8,
        };
        let advantages = compute_advantages(&groups, &spec).unwrap();
        // theta == theta_old: build_token_batch snapshots old = current.
        let batch = build_token_batch(&policy, &groups, &advantages, 1.0, true, None).unwrap();

        let pg_total_tokens = grad_logprob_weighted(&policy, &batch).unwrap();

        let ppo = grad_loss(
            &policy,
            &batch,
            &LossConfig {
                algorithm: Algorithm::PpoClip,
                kl_beta: 0.0,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert_tables_close(&ppo, &pg_total_tokens, 1e-10, "PPO-clip vs plain PG");

        let grpo = grad_loss(
            &policy,
            &batch,
            &LossConfig {
                algorithm: Algorithm::Grpo,
                kl_beta: 0.0,
                ..LossConfig::default()
            },
        )
        .unwrap();
        let pg_grpo_weights = weighted_pg_grad_oracle(&policy, &batch, true);
        assert_tables_close(&grpo, &pg_grpo_weights, 1e-10, "GRPO-clip vs weighted PG");

        // Oracle sanity: with the total-token weighting it reproduces the
        // implementation's plain policy gradient.
        let pg_oracle = weighted_pg_grad_oracle(&policy, &batch, false);
        assert_tables_close(&pg_oracle, &pg_total_tokens, 1e-10, "PG oracle vs gpg grad");

        // With uniform group sizes and response lengths the GRPO weighting
        // 1/(G|o_i|) coincides with total-token weighting, so its gradient
        // matches the plain policy-gradient loss gradient directly.
        let len = policy.positions();
        let group_size = 4;
        let uniform_groups: Vec<RolloutGroup> = (0..3)
            .map(|_| {
                let ctx = rng.gen_range(0..policy.contexts());
                let responses: Vec<Vec<u32>> = (0..group_size)
                    .map(|_| {
                        (0..len)
                            .map(|_| rng.gen_range(0..policy.vocab() as u32))
                            .collect()
                    })
                    .collect();
                let mut rewards: Vec<f64> = (0..group_size)
                    .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                    .collect();
                if rewards.iter().all(|&r| r == rewards[0]) {
                    rewards[0] = 1.0 - rewards[0];
                }
                RolloutGroup::new(ctx, responses, rewards).unwrap()
            })
            .collect();
        let adv_u = compute_advantages(&uniform_groups, &spec).unwrap();
        let batch_u =
            build_token_batch(&policy, &uniform_groups, &adv_u, 1.0, true, None).unwrap();
        let grpo_u = grad_loss(
            &policy,
            &batch_u,
            &LossConfig {
                algorithm: Algorithm::Grpo,
                kl_beta: 0.0,
                ..LossConfig::default()
            },
        )
        .unwrap();
        let pg_u = grad_logprob_weighted(&policy, &batch_u).unwrap();
        assert_tables_close(&grpo_u, &pg_u, 1e-10, "GRPO vs gpg grad, uniform lengths");
    }
    println!(
        "[PASS] criterion 3: GRPO/PPO clip gradients match the plain policy gradient \
         at the sampling point on 10 instances (1e-10 relative)"
    );
}

#[test]
fn criterion_04_age_estimator_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for trial in 0..50 {
        let policy = random_policy(&mut rng);
        let groups = random_groups(&policy, &mut rng, true);
        let advantages = compute_advantages(&groups, &AdvantageSpec::default()).unwrap();
        let stats = batch_stats(&groups).unwrap();
        assert!(stats.invalid > 0, "trial {trial} lost its degenerate group");

        // Alpha-scaled batch gradient.
        let scaled = {
            let batch =
                build_token_batch(&policy, &groups, &advantages, stats.alpha, false, None)
                    .unwrap();
            grad_logprob_weighted(&policy, &batch).unwrap()
        };

        // Mean over valid responses of per-response gradients. A response's
        // gradient is B times the batch gradient with every other
        // advantage masked to zero.
        let total_responses: usize = groups.iter().map(RolloutGroup::len).sum();
        let mut mean_valid = Table::zeros_like(policy.logits());
        for (gi, group) in groups.iter().enumerate() {
            if gpg_core::group_is_degenerate(group) {
                // Invalid responses must contribute exactly zero gradient.
                for ri in 0..group.len() {
                    let mut masked = advantages.clone();
                    for (mg, row) in masked.iter_mut().enumerate() {
                        for (mr, a) in row.iter_mut().enumerate() {
                            if (mg, mr) != (gi, ri) {
                                *a = 0.0;
                            }
                        }
                    }
                    let batch =
                        build_token_batch(&policy, &groups, &masked, 1.0, false, None).unwrap();
                    let g = grad_logprob_weighted(&policy, &batch).unwrap();
                    assert_eq!(g.max_abs(), 0.0, "invalid response produced gradient");
                }
                continue;
            }
            for ri in 0..group.len() {
                let mut masked = advantages.clone();
                for (mg, row) in masked.iter_mut().enumerate() {
                    for (mr, a) in row.iter_mut().enumerate() {
                        if (mg, mr) != (gi, ri) {
                            *a = 0.0;
                        }
                    }
                }
                let batch =
                    build_token_batch(&policy, &groups, &masked, 1.0, false, None).unwrap();
                let g = grad_logprob_weighted(&policy, &batch).unwrap();
                for (acc, &v) in mean_valid.data_mut().iter_mut().zip(g.data()) {
                    *acc += total_responses as f64 * v;
                }
            }
        }
        for v in mean_valid.data_mut() {
            *v /= stats.valid as f64;
        }

        assert_tables_close(&scaled, &mean_valid, 1e-10, "alpha-scaled vs valid mean");
    }
    println!(
        "[PASS] criterion 4: alpha-scaled batch gradient equals the valid-sample mean \
         gradient on 50 batches with degenerate groups (1e-10 relative)"
    );
}

#[test]
fn criterion_05_degenerate_zero_and_mean_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let modes = [NormMode::Unit, NormMode::GroupStd, NormMode::BatchStd];
    for trial in 0..1000 {
        let size = rng.gen_range(2..=8);
        let degenerate = trial % 2 == 0;
        let rewards: Vec<f64> = if degenerate {
            let v = [0.0, 1.0, rng.gen_range(-3.0..3.0)][trial % 3];
            vec![v; size]
        } else {
            let mut r: Vec<f64> = (0..size).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if r.iter().all(|&x| x == r[0]) {
                r[0] += 1.0;
            }
            r
        };
        let group =
            RolloutGroup::new(0, vec![vec![0u32]; size], rewards).unwrap();
        for mode in modes {
            let spec = AdvantageSpec { mode, epsilon: 1e-8 };
            let adv = compute_advantages(std::slice::from_ref(&group), &spec).unwrap();
            if degenerate {
                assert!(adv[0].iter().all(|&a| a == 0.0), "mode {mode:?}: {:?}", adv[0]);
            } else if mode != NormMode::BatchStd {
                let sum: f64 = adv[0].iter().sum();
                assert!(sum.abs() <= 1e-12, "mode {mode:?}: group sum {sum}");
            }
        }
    }
    println!(
        "[PASS] criterion 5: degenerate groups give exactly-zero advantages in every \
         mode; unit/group-std advantages sum to 0 within 1e-12 (1000 groups)"
    );
}

#[test]
fn criterion_06_threshold_resampling_guarantee() {
    // Difficulty mix: 40% of prompts come from always-correct contexts
    // (instant all-1 groups); the rest are 16-armed bandit contexts whose
    // groups start mostly all-0. Well above 30% degenerate fresh groups.
    let cfg = TrainConfig {
        prompts_per_batch: 4,
        group_size: 8,
        beta_th: 0.6,
        total_steps: 200,
        seed: 106,
        env: EnvConfig::Bandit {
            contexts: 10,
            arms: 16,
            easy_contexts: 4,
            correct_arms: None,
            noise: 0.0,
            easy_fraction: Some(0.4),
        },
        ..TrainConfig::default()
    };
    let beta_th = cfg.beta_th;
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut fresh_groups = 0usize;
    let mut fresh_degenerate = 0usize;
    for step in 0..200 {
        let collected = trainer.collect_batch().unwrap();

        // Threshold guarantee, recomputed from the raw groups.
        let stats = batch_stats(&collected.groups).unwrap();
        assert_eq!(stats, collected.stats);
        assert!(
            stats.valid_proportion() >= beta_th,
            "step {step}: proportion {}",
            stats.valid_proportion()
        );

        // Exact bookkeeping: every valid response sampled in any round is
        // still in the final pool.
        let collected_valid: usize = collected
            .rounds
            .iter()
            .map(|r| r.fresh_valid_responses)
            .sum();
        assert_eq!(collected_valid, stats.valid, "step {step}: valid responses dropped");

        for r in &collected.rounds {
            fresh_groups += r.fresh_groups;
            fresh_degenerate += r.fresh_groups - r.fresh_valid_groups;
        }
        trainer.train_step(&collected).unwrap();
    }
    let degenerate_rate = fresh_degenerate as f64 / fresh_groups as f64;
    assert!(
        degenerate_rate >= 0.30,
        "mix produced only {degenerate_rate:.3} degenerate groups"
    );
    println!(
        "[PASS] criterion 6: 200-step run, {degenerate_rate:.2} of {fresh_groups} fresh groups \
         degenerate, every batch >= beta_th = {beta_th}, bookkeeping exact"
    );
}

#[test]
fn criterion_07_bandit_convergence_across_seeds() {
    let start = Instant::now();
    // Reference outcome computed once with this implementation and frozen:
    // every one of the 20 seeds ends with p(correct arm) > 0.99.
    const FROZEN_PASS_COUNT: usize = 20;
    let mut converged = 0usize;
    let mut final_probs = Vec::new();
    for seed in 0..20 {
        let cfg = TrainConfig {
            prompts_per_batch: 4,
            group_size: 8,
            total_steps: 500,
            seed,
            // Late in the run nearly every group comes back all-correct, so
            // the threshold loop legitimately needs thousands of rounds to
            // accumulate a valid-enough pool; keep the safety cap out of
            // the way of the convergence measurement.
            max_collect_rounds: 1_000_000,
            optimizer: OptimizerConfig {
                kind: OptKind::Adam,
                learning_rate: 1e-2,
                weight_decay: 0.0,
            },
            env: EnvConfig::Bandit {
                contexts: 1,
                arms: 2,
                easy_contexts: 0,
                correct_arms: Some(vec![0]),
                noise: 0.0,
                easy_fraction: None,
            },
            ..TrainConfig::default()
        };
        let result = run(cfg).unwrap();
        let p = result.policy.token_prob(0, 0, 0);
        final_probs.push(p);
        if p >= 0.95 {
            converged += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(
        converged >= 18,
        "only {converged}/20 seeds reached p >= 0.95: {final_probs:?}"
    );
    assert_eq!(
        converged, FROZEN_PASS_COUNT,
        "convergence count drifted from the frozen reference: {final_probs:?}"
    );
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "[PASS] criterion 7: GPG+AGE bandit converged in {converged}/20 seeds \
         (min final p = {:.6}, {elapsed:?})",
        final_probs.iter().cloned().fold(f64::INFINITY, f64::min)
    );
}

#[test]
fn criterion_08_kl_estimator_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut worst_dev: f64 = 0.0;
    for _ in 0..10_000 {
        let a = -rng.gen_range(0.0..10.0);
        let b = -rng.gen_range(0.0..10.0);
        let v = kl_k3(a, b);
        assert!(v >= 0.0, "kl_k3({a}, {b}) = {v}");
        // Direct evaluation of u - ln u - 1.
        let u = (b - a).exp();
        let direct = u - u.ln() - 1.0;
        let dev = (v - direct).abs();
        worst_dev = worst_dev.max(dev);
        assert!(dev <= 1e-12, "kl_k3({a}, {b}) = {v} vs direct {direct}");

        let same = -rng.gen_range(0.0..10.0);
        assert_eq!(kl_k3(same, same), 0.0);
    }
    println!(
        "[PASS] criterion 8: k3 nonnegative on 10,000 pairs, exact zero at equality, \
         matches direct evaluation (worst dev {worst_dev:.2e})"
    );
}

#[test]
fn criterion_10_metrics_faithfulness() {
    let mut checked = 0usize;
    let mut seed = 0u64;
    while checked < 50 {
        seed += 1;
        let cfg = TrainConfig {
            prompts_per_batch: 5,
            group_size: 4,
            beta_th: 0.5,
            seed: 1000 + seed,
            env: EnvConfig::Bandit {
                contexts: 6,
                arms: 4,
                easy_contexts: 2,
                correct_arms: None,
                noise: 0.1,
                easy_fraction: Some(0.35),
            },
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        for _ in 0..5 {
            let collected = trainer.collect_batch().unwrap();
            let row = trainer.train_step(&collected).unwrap();

            // Brute-force recomputation from the raw rollouts.
            let groups = &collected.groups;
            let n_groups = groups.len() as f64;
            let mut all_zero = 0usize;
            let mut all_one = 0usize;
            let mut std_sum = 0.0;
            let mut invalid = 0usize;
            let mut total = 0usize;
            for g in groups {
                total += g.rewards.len();
                if g.rewards.iter().all(|&r| r == 0.0) {
                    all_zero += 1;
                }
                if g.rewards.iter().all(|&r| r == 1.0) {
                    all_one += 1;
                }
                if g.rewards.iter().all(|&r| r == g.rewards[0]) {
                    invalid += g.rewards.len();
                }
                let n = g.rewards.len() as f64;
                let mean = g.rewards.iter().sum::<f64>() / n;
                let var =
                    g.rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
                std_sum += var.sqrt();
            }
            assert_eq!(row.prop_all_zero, all_zero as f64 / n_groups);
            assert_eq!(row.prop_all_one, all_one as f64 / n_groups);
            assert_eq!(row.mean_group_std, std_sum / n_groups);
            assert_eq!(row.alpha, total as f64 / (total - invalid) as f64);
            assert!(row.prop_all_zero + row.prop_all_one <= 1.0);
            checked += 1;
        }
    }
    println!(
        "[PASS] criterion 10: logged all-zero/all-one proportions, group reward std, \
         and alpha match brute-force recomputation exactly on {checked} batches"
    );
}
