//! Scalar losses: the group policy-gradient objective and the clipped
//! surrogate baselines (PPO, GRPO, Dr.GRPO, DAPO).
//!
//! All losses are returned as minimization targets (negated objectives).
//! The group policy-gradient loss is linear in the batch's alpha factor;
//! the surrogate baselines ignore alpha, matching their original forms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Plain policy gradient on group-relative advantages, optionally
    /// rescaled by alpha (no surrogate, no clipping, no reference policy).
    #[default]
    Gpg,
    /// Clipped ratio plus a k3 KL penalty against a reference policy,
    /// averaged 1/(G*|o_i|) within each group.
    Grpo,
    /// Clipped ratio with unnormalized (unit-mode) advantages and
    /// total-token normalization.
    DrGrpo,
    /// Clipped ratio only, symmetric bounds.
    PpoClip,
    /// Clipped ratio with asymmetric bounds.
    Dapo,
}

/// Loss hyperparameters shared by all algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub algorithm: Algorithm,
    /// Symmetric clip half-width for PPO/GRPO/Dr.GRPO.
    pub clip_eps: f64,
    /// Lower clip half-width for DAPO (ratio floor 1 - clip_eps_low).
    pub clip_eps_low: f64,
    /// Upper clip half-width for DAPO (ratio ceiling 1 + clip_eps_high).
    pub clip_eps_high: f64,
    /// KL penalty coefficient; only the GRPO objective uses it.
    pub kl_beta: f64,
    /// Whether the trainer scales the GPG loss by the batch alpha.
    /// Consumed when the trainer populates [`TokenBatch::alpha`]; the
    /// surrogate baselines are never alpha-scaled.
    pub apply_alpha: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Gpg,
            clip_eps: 0.2,
            clip_eps_low: 0.2,
            clip_eps_high: 0.28,
            kl_beta: 0.04,
            apply_alpha: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.clip_eps <= 0.0 || self.clip_eps_low <= 0.0 || self.clip_eps_high <= 0.0
            || self.clip_eps.is_nan()
            || self.clip_eps_low.is_nan()
            || self.clip_eps_high.is_nan()
        {
            return Err(LossError::InvalidConfig(
                "clip widths must be positive".into(),
            ));
        }
        if self.kl_beta < 0.0 || self.kl_beta.is_nan() {
            return Err(LossError::InvalidConfig("kl_beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// One response's token-level data inside a [`TokenBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTokens {
    /// Context/prompt id the response was sampled for.
    pub context: usize,
    /// The sampled token sequence.
    pub tokens: Vec<u32>,
    /// log pi_theta(o_t | .) per token under the current policy. All <= 0.
    pub logp_cur: Vec<f64>,
    /// Per-token log-probs under the policy that sampled the batch.
    /// Required by the ratio-based baselines.
    pub logp_old: Option<Vec<f64>>,
    /// Per-token log-probs under the reference policy (GRPO KL penalty).
    pub logp_ref: Option<Vec<f64>>,
    /// The response-level advantage; applies to every token.
    pub advantage: f64,
}

impl ResponseTokens {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Token-level view of a batch, preserving group structure.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `groups[g][i]` is response i of group g.
    pub groups: Vec<Vec<ResponseTokens>>,
    /// Batch correction factor; 1.0 when the correction is disabled.
    pub alpha: f64,
}

impl TokenBatch {
    /// Validating constructor: log-prob arrays must match token counts,
    /// log-probs must be finite and <= 0, advantages finite, alpha positive.
    pub fn new(groups: Vec<Vec<ResponseTokens>>, alpha: f64) -> Result<Self, LossError> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(LossError::InvalidBatch(format!("bad alpha {alpha}")));
        }
        for group in &groups {
            for resp in group {
                let n = resp.tokens.len();
                if n == 0 {
                    return Err(LossError::InvalidBatch("empty response".into()));
                }
                let check = |name: &str, v: &[f64]| -> Result<(), LossError> {
                    if v.len() != n {
                        return Err(LossError::InvalidBatch(format!(
                            "{name} length {} != token count {n}",
                            v.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite() || *x > 0.0) {
                        return Err(LossError::InvalidBatch(format!(
                            "{name} entries must be finite and <= 0"
                        )));
                    }
                    Ok(())
                };
                check("logp_cur", &resp.logp_cur)?;
                if let Some(old) = &resp.logp_old {
                    check("logp_old", old)?;
                }
                if let Some(r) = &resp.logp_ref {
                    check("logp_ref", r)?;
                }
                if !resp.advantage.is_finite() {
                    return Err(LossError::InvalidBatch("non-finite advantage".into()));
                }
            }
        }
        Ok(Self { groups, alpha })
    }

    /// Total token count across every response in the batch.
    pub fn total_tokens(&self) -> usize {
        self.responses().map(ResponseTokens::len).sum()
    }

    /// Number of responses across all groups.
    pub fn n_responses(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Flat iterator over all responses.
    pub fn responses(&self) -> impl Iterator<Item = &ResponseTokens> {
        self.groups.iter().flatten()
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("invalid token batch: {0}")]
    InvalidBatch(String),
    #[error("batch has zero tokens")]
    ZeroTokens,
    #[error("{0} requires old-policy log-probs")]
    MissingOldLogProbs(&'static str),
    #[error("GRPO with kl_beta > 0 requires reference-policy log-probs")]
    MissingRefLogProbs,
}

/// Group policy-gradient loss:
/// `alpha * (-1 / total_tokens) * sum_i sum_t logp(o_{i,t}) * A_i`.
///
/// Token normalization is by the total token count across the whole batch.
pub fn gpg_loss(batch: &TokenBatch) -> Result<f64, LossError> {
    let total = batch.total_tokens();
    if total == 0 {
        return Err(LossError::ZeroTokens);
    }
    let weighted: f64 = batch
        .responses()
        .map(|r| r.advantage * r.logp_cur.iter().sum::<f64>())
        .sum();
    Ok(batch.alpha * (-weighted / total as f64))
}

/// PPO's clipped surrogate term:
/// `min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)`.
///
/// This is the objective-side term; callers negate it to form a loss.
pub fn ppo_clip_term(ratio: f64, adv: f64, eps: f64) -> f64 {
    dapo_clip_term(ratio, adv, eps, eps)
}

/// The asymmetric variant with bounds `[1 - eps_low, 1 + eps_high]`.
pub fn dapo_clip_term(ratio: f64, adv: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * adv).min(clipped * adv)
}

/// Derivative of the clip term with respect to the current-policy log-prob.
///
/// `d/dlogp min(r*a, clamp(r)*a)` with `r = exp(logp - logp_old)`: the
/// unclipped branch contributes `r*a`; the clipped branch contributes 0
/// because whenever it is strictly smaller the ratio sits outside the
/// clamp interval, where the clamp is flat. Ties take the unclipped branch.
pub(crate) fn clip_term_dlogp(ratio: f64, adv: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    if ratio * adv <= clipped * adv {
        ratio * adv
    } else {
        0.0
    }
}

/// The k3 KL estimator: with `u = pi_ref / pi_theta`, returns
/// `u - ln(u) - 1`. Nonnegative for all inputs; zero iff the log-probs agree.
pub fn kl_k3(logp_cur: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_cur; // = ln(u), exactly
    (d.exp() - d - 1.0).max(0.0)
}

/// Derivative of [`kl_k3`] with respect to `logp_cur`: `1 - u`.
pub(crate) fn kl_k3_dlogp(logp_cur: f64, logp_ref: f64) -> f64 {
    1.0 - (logp_ref - logp_cur).exp()
}

fn require_old<'a>(
    resp: &'a ResponseTokens,
    algo: &'static str,
) -> Result<&'a [f64], LossError> {
    resp.logp_old
        .as_deref()
        .ok_or(LossError::MissingOldLogProbs(algo))
}

/// Evaluate the configured baseline loss (negated objective).
///
/// * GRPO: for each group, `1/(G*|o_i|)` weighting of `clip - beta*k3`,
///   then the mean over groups.
/// * Dr.GRPO / PPO-clip: symmetric clip term, normalized by the total
///   token count of the batch.
/// * DAPO: asymmetric clip term, total-token normalization.
/// * GPG: delegates to [`gpg_loss`] (ratios and clipping never enter).
pub fn surrogate_loss(batch: &TokenBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    if batch.total_tokens() == 0 {
        return Err(LossError::ZeroTokens);
    }
    match cfg.algorithm {
        Algorithm::Gpg => gpg_loss(batch),
        Algorithm::Grpo => {
            let mut group_sum = 0.0;
            for group in &batch.groups {
                let g = group.len() as f64;
                let mut acc = 0.0;
                for resp in group {
                    let old = require_old(resp, "GRPO")?;
                    let refs = if cfg.kl_beta > 0.0 {
                        Some(resp.logp_ref.as_deref().ok_or(LossError::MissingRefLogProbs)?)
                    } else {
                        None
                    };
                    let mut token_sum = 0.0;
                    for (t, (&lp, &lp_old)) in resp.logp_cur.iter().zip(old).enumerate() {
                        let ratio = (lp - lp_old).exp();
                        let mut term = ppo_clip_term(ratio, resp.advantage, cfg.clip_eps);
                        if let Some(refs) = refs {
                            term -= cfg.kl_beta * kl_k3(lp, refs[t]);
                        }
                        token_sum += term;
                    }
                    acc += token_sum / (g * resp.len() as f64);
                }
                group_sum += acc;
            }
            Ok(-group_sum / batch.groups.len() as f64)
        }
        Algorithm::DrGrpo | Algorithm::PpoClip => {
            clipped_total_token_loss(batch, cfg.clip_eps, cfg.clip_eps)
        }
        Algorithm::Dapo => clipped_total_token_loss(batch, cfg.clip_eps_low, cfg.clip_eps_high),
    }
}

fn clipped_total_token_loss(
    batch: &TokenBatch,
    eps_low: f64,
    eps_high: f64,
) -> Result<f64, LossError> {
    let total = batch.total_tokens() as f64;
    let mut sum = 0.0;
    for resp in batch.responses() {
        let old = require_old(resp, "clipped surrogate")?;
        for (&lp, &lp_old) in resp.logp_cur.iter().zip(old) {
            let ratio = (lp - lp_old).exp();
            sum += dapo_clip_term(ratio, resp.advantage, eps_low, eps_high);
        }
    }
    Ok(-sum / total)
}
