//! Group-based policy-gradient laboratory.
//!
//! Implements the group policy-gradient estimator (group-mean advantages,
//! the `alpha = B/(B-M)` correction for batches containing degenerate
//! groups, and threshold resampling) next to PPO-clip, GRPO, Dr.GRPO, and
//! DAPO baselines, all over an exact tabular policy whose analytic
//! gradients can be checked coordinate-by-coordinate against finite
//! differences. A separate module simulates data-parallel gradient
//! averaging with invalid samples and verifies the bias identity
//! `naive = true * (S/B)` and its alpha correction.

pub mod advantage;
pub mod distsim;
pub mod envs;
pub mod losses;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use advantage::{
    batch_stats, compute_advantages, group_is_degenerate, AdvantageError, AdvantageSpec,
    BatchStats, NormMode, RolloutGroup,
};
pub use distsim::{
    naive_average, naive_average_parallel, true_average, verify_identity, AverageReport,
    DistsimError, WorkerShard,
};
pub use envs::{difficulty_mix, BanditEnv, ContextSampler, Env, EnvConfig, EnvError, SequenceEnv};
pub use losses::{
    dapo_clip_term, gpg_loss, kl_k3, ppo_clip_term, surrogate_loss, Algorithm, LossConfig,
    LossError, ResponseTokens, TokenBatch,
};
pub use policy::{
    apply_update, finite_diff_grad, grad_logprob_weighted, grad_loss, refresh_logp_cur, OptKind,
    OptimizerConfig, OptimizerState, PolicyError, PolicyParams, Table,
};
pub use trainer::{
    build_token_batch, collect_batch_with, run, Collected, CollectSpec, RoundLog, RunResult,
    TrainConfig, TrainError, TrainMetricsRow, Trainer,
};
