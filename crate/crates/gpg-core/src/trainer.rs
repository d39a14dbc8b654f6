//! The training loop: group rollout collection with threshold resampling,
//! advantage and alpha computation, loss/gradient evaluation, parameter
//! updates, and per-step metrics.
//!
//! Collection keeps sampling rounds of fresh groups, carrying forward the
//! valid (non-degenerate) groups already gathered, until the pooled valid
//! proportion reaches the threshold `beta_th`. Only then does a gradient
//! step happen, so every batch that reaches the optimizer satisfies the
//! threshold by construction.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{
    batch_stats, compute_advantages, group_is_degenerate, population_std, AdvantageError,
    AdvantageSpec, BatchStats, RolloutGroup,
};
use crate::envs::{ContextSampler, Env, EnvConfig, EnvError};
use crate::losses::{surrogate_loss, Algorithm, LossConfig, LossError, ResponseTokens, TokenBatch};
use crate::policy::{
    apply_update, grad_loss, OptimizerConfig, OptimizerState, PolicyError, PolicyParams,
};
use crate::rng::substream;

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub advantage: AdvantageSpec,
    /// Prompts sampled per collection round (P).
    pub prompts_per_batch: usize,
    /// Responses per prompt (G).
    pub group_size: usize,
    /// Minimum valid-sample proportion before a gradient step.
    pub beta_th: f64,
    /// Accept when the proportion strictly exceeds `beta_th` instead of
    /// meeting it (the `alpha < 1/beta_th` reading of the loop condition).
    pub strict_threshold: bool,
    /// Abort collection after this many rounds below the threshold.
    pub max_collect_rounds: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Std of the Gaussian logit init; 0 starts from the uniform policy.
    pub init_scale: f64,
    pub optimizer: OptimizerConfig,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            advantage: AdvantageSpec::default(),
            prompts_per_batch: 4,
            group_size: 8,
            beta_th: 0.6,
            strict_threshold: false,
            max_collect_rounds: 64,
            total_steps: 100,
            seed: 0,
            init_scale: 0.0,
            optimizer: OptimizerConfig::default(),
            env: EnvConfig::Bandit {
                contexts: 1,
                arms: 2,
                easy_contexts: 0,
                correct_arms: None,
                noise: 0.0,
                easy_fraction: None,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        if self.prompts_per_batch < 1 {
            return Err(TrainError::InvalidConfig("prompts_per_batch must be >= 1".into()));
        }
        if self.beta_th.is_nan() || self.beta_th <= 0.0 || self.beta_th > 1.0 {
            return Err(TrainError::InvalidConfig(format!(
                "beta_th must be in (0, 1], got {}",
                self.beta_th
            )));
        }
        if self.max_collect_rounds < 1 {
            return Err(TrainError::InvalidConfig("max_collect_rounds must be >= 1".into()));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "init_scale must be finite and >= 0, got {}",
                self.init_scale
            )));
        }
        self.advantage.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    fn collect_spec(&self) -> CollectSpec {
        CollectSpec {
            beta_th: self.beta_th,
            strict: self.strict_threshold,
            max_rounds: self.max_collect_rounds,
        }
    }
}

/// Threshold-resampling parameters for [`collect_batch_with`].
#[derive(Debug, Clone, Copy)]
pub struct CollectSpec {
    pub beta_th: f64,
    pub strict: bool,
    pub max_rounds: usize,
}

impl CollectSpec {
    fn passes(&self, valid_proportion: f64) -> bool {
        if self.strict {
            valid_proportion > self.beta_th
        } else {
            valid_proportion >= self.beta_th
        }
    }
}

/// Bookkeeping for one collection round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLog {
    pub fresh_groups: usize,
    pub fresh_valid_groups: usize,
    pub fresh_responses: usize,
    pub fresh_valid_responses: usize,
    /// Pool counts after merging this round (carried valid + fresh).
    pub pool_responses: usize,
    pub pool_valid_responses: usize,
}

/// A batch that satisfied the valid-proportion threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Collected {
    pub groups: Vec<RolloutGroup>,
    pub stats: BatchStats,
    pub rounds_used: usize,
    pub rounds: Vec<RoundLog>,
}

/// Per-step metrics record. Field order is the on-disk column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean over groups of the within-group reward std.
    pub mean_group_std: f64,
    pub alpha: f64,
    /// Fraction of groups whose rewards are all zero.
    pub prop_all_zero: f64,
    /// Fraction of groups whose rewards are all one.
    pub prop_all_one: f64,
    pub loss: f64,
    pub valid_proportion: f64,
    pub collect_rounds_used: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(
        "collection stalled after {rounds} rounds: pool has {valid} valid of {total} responses"
    )]
    CollectionStalled {
        rounds: usize,
        total: usize,
        valid: usize,
    },
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Accumulate-and-resample collection over an arbitrary round source.
///
/// Each round contributes `round_fn(round_index)` fresh groups. The pool is
/// the valid groups carried from earlier rounds plus the entire fresh
/// round; collection stops as soon as the pool's valid proportion passes
/// the threshold. Carried valid groups are never dropped; degenerate
/// groups from earlier rounds are discarded when the pool rolls over.
pub fn collect_batch_with<F>(mut round_fn: F, spec: CollectSpec) -> Result<Collected, TrainError>
where
    F: FnMut(usize) -> Result<Vec<RolloutGroup>, TrainError>,
{
    // Everything carried is valid, so pool counts follow from the carried
    // response count plus the fresh round; no rescan of the growing pool.
    let mut carried: Vec<RolloutGroup> = Vec::new();
    let mut carried_responses = 0usize;
    let mut rounds = Vec::new();
    for round in 1..=spec.max_rounds {
        let fresh = round_fn(round - 1)?;
        let fresh_groups = fresh.len();
        let fresh_valid_groups = fresh.iter().filter(|g| !group_is_degenerate(g)).count();
        let fresh_responses: usize = fresh.iter().map(RolloutGroup::len).sum();
        let fresh_valid_responses: usize = fresh
            .iter()
            .filter(|g| !group_is_degenerate(g))
            .map(RolloutGroup::len)
            .sum();

        let pool_responses = carried_responses + fresh_responses;
        let pool_valid_responses = carried_responses + fresh_valid_responses;
        rounds.push(RoundLog {
            fresh_groups,
            fresh_valid_groups,
            fresh_responses,
            fresh_valid_responses,
            pool_responses,
            pool_valid_responses,
        });

        if pool_valid_responses > 0 {
            let proportion = pool_valid_responses as f64 / pool_responses as f64;
            if spec.passes(proportion) {
                let mut groups = carried;
                groups.extend(fresh);
                let stats = batch_stats(&groups)?;
                return Ok(Collected {
                    groups,
                    stats,
                    rounds_used: round,
                    rounds,
                });
            }
        }
        for g in fresh {
            if !group_is_degenerate(&g) {
                carried_responses += g.len();
                carried.push(g);
            }
        }
    }
    let last = rounds.last().copied();
    Err(TrainError::CollectionStalled {
        rounds: spec.max_rounds,
        total: last.map_or(0, |l| l.pool_responses),
        valid: last.map_or(0, |l| l.pool_valid_responses),
    })
}

/// Assemble the token-level batch the losses and gradients consume.
///
/// `advantages` must mirror `groups` (as produced by
/// [`compute_advantages`]). Old-policy log-probs are snapshotted from
/// `policy` itself: collection and the single update per batch happen at
/// the same parameters, so the sampling policy is the current policy.
pub fn build_token_batch(
    policy: &PolicyParams,
    groups: &[RolloutGroup],
    advantages: &[Vec<f64>],
    alpha: f64,
    with_old: bool,
    ref_policy: Option<&PolicyParams>,
) -> Result<TokenBatch, TrainError> {
    let mut out = Vec::with_capacity(groups.len());
    for (group, advs) in groups.iter().zip(advantages) {
        let mut responses = Vec::with_capacity(group.len());
        for (tokens, &advantage) in group.responses.iter().zip(advs) {
            let logp_cur = policy.logprob(group.prompt_id, tokens)?;
            let logp_old = with_old.then(|| logp_cur.clone());
            let logp_ref = match ref_policy {
                Some(r) => Some(r.logprob(group.prompt_id, tokens)?),
                None => None,
            };
            responses.push(ResponseTokens {
                context: group.prompt_id,
                tokens: tokens.clone(),
                logp_cur,
                logp_old,
                logp_ref,
                advantage,
            });
        }
        out.push(responses);
    }
    Ok(TokenBatch::new(out, alpha)?)
}

/// Owns the policy, optimizer state, environment, and RNG substreams for
/// one training run.
pub struct Trainer {
    cfg: TrainConfig,
    policy: PolicyParams,
    optimizer: OptimizerState,
    env: Env,
    sampler: ContextSampler,
    rollout_rng: ChaCha8Rng,
    context_rng: ChaCha8Rng,
    /// Frozen initial policy; present when the GRPO KL penalty is active.
    ref_policy: Option<PolicyParams>,
    steps_done: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let noise_seed = {
            use rand::Rng;
            substream(cfg.seed, "env-noise").gen::<u64>()
        };
        let (env, sampler) = cfg.env.build(noise_seed)?;
        let policy = if cfg.init_scale > 0.0 {
            let mut init_rng = substream(cfg.seed, "init");
            PolicyParams::random(
                env.contexts(),
                env.response_len(),
                env.vocab(),
                cfg.init_scale,
                &mut init_rng,
            )
        } else {
            PolicyParams::uniform(env.contexts(), env.response_len(), env.vocab())
        };
        let ref_policy = (cfg.loss.algorithm == Algorithm::Grpo && cfg.loss.kl_beta > 0.0)
            .then(|| policy.clone());
        let optimizer = OptimizerState::new(cfg.optimizer)?;
        Ok(Self {
            rollout_rng: substream(cfg.seed, "rollout"),
            context_rng: substream(cfg.seed, "contexts"),
            cfg,
            policy,
            optimizer,
            env,
            sampler,
            ref_policy,
            steps_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn into_policy(self) -> PolicyParams {
        self.policy
    }

    /// Sample groups until the pooled valid proportion reaches `beta_th`.
    pub fn collect_batch(&mut self) -> Result<Collected, TrainError> {
        let spec = self.cfg.collect_spec();
        let prompts = self.cfg.prompts_per_batch;
        let group_size = self.cfg.group_size;
        let len = self.env.response_len();
        let policy = &self.policy;
        let env = &self.env;
        let sampler = &self.sampler;
        let context_rng = &mut self.context_rng;
        let rollout_rng = &mut self.rollout_rng;
        collect_batch_with(
            |_round| {
                let mut groups = Vec::with_capacity(prompts);
                for _ in 0..prompts {
                    let ctx = sampler.sample(context_rng);
                    let responses = policy.sample_group(ctx, group_size, len, rollout_rng)?;
                    let mut rewards = Vec::with_capacity(group_size);
                    for r in &responses {
                        rewards.push(env.reward(ctx, r)?);
                    }
                    groups.push(RolloutGroup::new(ctx, responses, rewards)?);
                }
                Ok(groups)
            },
            spec,
        )
    }

    /// One gradient step on a collected batch. On error the parameters and
    /// optimizer state are left untouched.
    pub fn train_step(&mut self, collected: &Collected) -> Result<TrainMetricsRow, TrainError> {
        let cfg = &self.cfg;
        let advantages = compute_advantages(&collected.groups, &cfg.advantage)?;
        let alpha = if cfg.loss.algorithm == Algorithm::Gpg && cfg.loss.apply_alpha {
            collected.stats.alpha
        } else {
            1.0
        };
        let with_old = cfg.loss.algorithm != Algorithm::Gpg;
        let batch = build_token_batch(
            &self.policy,
            &collected.groups,
            &advantages,
            alpha,
            with_old,
            self.ref_policy.as_ref(),
        )?;

        let loss = surrogate_loss(&batch, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "loss" });
        }
        let grad = grad_loss(&self.policy, &batch, &cfg.loss)?;
        apply_update(&mut self.policy, &grad, &mut self.optimizer)?;

        let row = metrics_row(self.steps_done, collected, loss);
        self.steps_done += 1;
        Ok(row)
    }
}

fn metrics_row(step: usize, collected: &Collected, loss: f64) -> TrainMetricsRow {
    let groups = &collected.groups;
    let n_groups = groups.len() as f64;
    let n_responses: usize = groups.iter().map(RolloutGroup::len).sum();
    let mean_reward =
        groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n_responses as f64;
    let mean_group_std =
        groups.iter().map(|g| population_std(&g.rewards)).sum::<f64>() / n_groups;
    let prop_all_zero = groups
        .iter()
        .filter(|g| g.rewards.iter().all(|&r| r == 0.0))
        .count() as f64
        / n_groups;
    let prop_all_one = groups
        .iter()
        .filter(|g| g.rewards.iter().all(|&r| r == 1.0))
        .count() as f64
        / n_groups;
    TrainMetricsRow {
        step,
        mean_reward,
        mean_group_std,
        alpha: collected.stats.alpha,
        prop_all_zero,
        prop_all_one,
        loss,
        valid_proportion: collected.stats.valid_proportion(),
        collect_rounds_used: collected.rounds_used,
    }
}

/// A finished run: the metrics series and the final policy.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<TrainMetricsRow>,
    pub policy: PolicyParams,
}

/// Execute `total_steps` collect/step cycles. Deterministic given the
/// config's seed; errors carry the step index at which they occurred.
pub fn run(cfg: TrainConfig) -> Result<RunResult, TrainError> {
    let total = cfg.total_steps;
    let mut trainer = Trainer::new(cfg)?;
    let mut metrics = Vec::with_capacity(total);
    for step in 0..total {
        let at = |e: TrainError| TrainError::AtStep {
            step,
            source: Box::new(e),
        };
        let collected = trainer.collect_batch().map_err(at)?;
        let row = trainer.train_step(&collected).map_err(at)?;
        metrics.push(row);
    }
    Ok(RunResult {
        metrics,
        policy: trainer.into_policy(),
    })
}
