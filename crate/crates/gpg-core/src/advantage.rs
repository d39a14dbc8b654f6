//! Group-relative advantages and the batch correction factor alpha.
//!
//! A group is the set of responses sampled for one prompt. Advantages are
//! computed relative to the group's mean reward; a group whose rewards are
//! all equal is degenerate and contributes exactly zero advantage for every
//! member. The fraction of responses that live in degenerate groups defines
//! the correction factor `alpha = B / (B - M)` used to rescale the batch
//! gradient onto valid samples only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One prompt's sampled responses with their scalar rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    /// Context/prompt identifier; indexes the policy's logit table.
    pub prompt_id: usize,
    /// Token sequences, one per response. Each must be non-empty.
    pub responses: Vec<Vec<u32>>,
    /// Scalar rewards, one per response.
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    /// Build a group, validating the invariants: at least two responses,
    /// matching lengths, non-empty token sequences, finite rewards.
    pub fn new(
        prompt_id: usize,
        responses: Vec<Vec<u32>>,
        rewards: Vec<f64>,
    ) -> Result<Self, AdvantageError> {
        if responses.len() != rewards.len() {
            return Err(AdvantageError::InvalidGroup(format!(
                "group {prompt_id}: {} responses but {} rewards",
                responses.len(),
                rewards.len()
            )));
        }
        if responses.len() < 2 {
            return Err(AdvantageError::InvalidGroup(format!(
                "group {prompt_id}: needs at least 2 responses, got {}",
                responses.len()
            )));
        }
        if responses.iter().any(|r| r.is_empty()) {
            return Err(AdvantageError::InvalidGroup(format!(
                "group {prompt_id}: empty response"
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(AdvantageError::InvalidGroup(format!(
                "group {prompt_id}: non-finite reward"
            )));
        }
        Ok(Self {
            prompt_id,
            responses,
            rewards,
        })
    }

    /// Number of responses in the group.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Total token count over all responses.
    pub fn token_count(&self) -> usize {
        self.responses.iter().map(Vec::len).sum()
    }
}

/// Denominator applied to the group-mean-subtracted reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// No normalization; the advantage is the raw deviation from the group mean.
    #[default]
    Unit,
    /// Divide by the within-group reward std (GRPO's convention).
    GroupStd,
    /// Divide by the reward std of the whole batch.
    BatchStd,
}

/// How advantages are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageSpec {
    pub mode: NormMode,
    /// Floor added to any std denominator. Must be positive.
    pub epsilon: f64,
}

impl Default for AdvantageSpec {
    fn default() -> Self {
        Self {
            mode: NormMode::Unit,
            epsilon: 1e-8,
        }
    }
}

impl AdvantageSpec {
    pub fn validate(&self) -> Result<(), AdvantageError> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(AdvantageError::InvalidSpec(format!(
                "epsilon must be a positive finite number, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-batch sample counts and the gradient correction factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Total responses in the batch (B).
    pub total: usize,
    /// Responses belonging to degenerate groups (M).
    pub invalid: usize,
    /// Valid responses (S = B - M).
    pub valid: usize,
    /// B / (B - M). Always >= 1.
    pub alpha: f64,
}

impl BatchStats {
    /// Fraction of responses in non-degenerate groups; equals 1 / alpha.
    pub fn valid_proportion(&self) -> f64 {
        self.valid as f64 / self.total as f64
    }
}

#[derive(Debug, Error)]
pub enum AdvantageError {
    #[error("invalid rollout group: {0}")]
    InvalidGroup(String),
    #[error("invalid advantage spec: {0}")]
    InvalidSpec(String),
    #[error("batch contains no groups")]
    EmptyBatch,
    #[error("all {total} responses are invalid; keep collecting")]
    AllInvalid { total: usize },
}

/// A group is degenerate when every reward is equal (in the binary-reward
/// setting: all-correct or all-wrong). Such a group yields zero advantage
/// for every member and therefore no gradient.
pub fn group_is_degenerate(group: &RolloutGroup) -> bool {
    let mut iter = group.rewards.iter();
    let first = iter.next().expect("group invariant: non-empty");
    iter.all(|r| r == first)
}

/// Population standard deviation (divide by n, not n - 1).
pub(crate) fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Compute the per-response advantage for every group in the batch.
///
/// For response i of a group with rewards `{R}`:
/// `A_i = (r_i - mean{R}) / F`, where F is 1, the group's reward std + eps,
/// or the whole batch's reward std + eps depending on `spec.mode`. The same
/// scalar applies to every token of the response. Degenerate groups produce
/// exactly 0.0 for every member under every mode.
///
/// The returned vector mirrors the input shape: `out[g][i]` is the advantage
/// of response i in group g.
pub fn compute_advantages(
    groups: &[RolloutGroup],
    spec: &AdvantageSpec,
) -> Result<Vec<Vec<f64>>, AdvantageError> {
    spec.validate()?;
    if groups.is_empty() {
        return Err(AdvantageError::EmptyBatch);
    }

    let batch_std = match spec.mode {
        NormMode::BatchStd => {
            let all: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
            Some(population_std(&all))
        }
        _ => None,
    };

    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        if group_is_degenerate(group) {
            out.push(vec![0.0; group.len()]);
            continue;
        }
        let mean = group.rewards.iter().sum::<f64>() / group.len() as f64;
        let denom = match spec.mode {
            NormMode::Unit => 1.0,
            NormMode::GroupStd => population_std(&group.rewards) + spec.epsilon,
            NormMode::BatchStd => batch_std.unwrap() + spec.epsilon,
        };
        out.push(group.rewards.iter().map(|r| (r - mean) / denom).collect());
    }
    Ok(out)
}

/// Count responses, invalid responses, and derive alpha = B / (B - M).
///
/// Errors with [`AdvantageError::AllInvalid`] when every group is degenerate
/// (alpha would divide by zero); the caller must keep collecting samples.
pub fn batch_stats(groups: &[RolloutGroup]) -> Result<BatchStats, AdvantageError> {
    if groups.is_empty() {
        return Err(AdvantageError::EmptyBatch);
    }
    let total: usize = groups.iter().map(RolloutGroup::len).sum();
    let invalid: usize = groups
        .iter()
        .filter(|g| group_is_degenerate(g))
        .map(RolloutGroup::len)
        .sum();
    let valid = total - invalid;
    if valid == 0 {
        return Err(AdvantageError::AllInvalid { total });
    }
    Ok(BatchStats {
        total,
        invalid,
        valid,
        alpha: total as f64 / valid as f64,
    })
}
