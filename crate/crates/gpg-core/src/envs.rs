//! Synthetic verifiable-reward environments.
//!
//! Both environments score a full response with a single terminal reward,
//! binary by default (1.0 for the right answer, 0.0 otherwise). Contexts
//! may be marked trivially correct (any response scores 1.0); mixing such
//! contexts with ordinary ones reproduces, at desk scale, batches where a
//! controllable fraction of groups comes back all-right or all-wrong.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::hash_unit;

/// Contextual bandit: one arm pull per episode, reward 1.0 on the correct
/// arm, optionally flipped with probability `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditEnv {
    arms: usize,
    /// Per context: `Some(arm)` for an ordinary context, `None` for a
    /// trivially-correct one (every arm rewarded).
    correct_arm: Vec<Option<u32>>,
    noise: f64,
    noise_seed: u64,
}

impl BanditEnv {
    pub fn new(
        arms: usize,
        correct_arm: Vec<Option<u32>>,
        noise: f64,
        noise_seed: u64,
    ) -> Result<Self, EnvError> {
        if arms < 2 {
            return Err(EnvError::BadSpec(format!("need at least 2 arms, got {arms}")));
        }
        if correct_arm.is_empty() {
            return Err(EnvError::BadSpec("need at least one context".into()));
        }
        if let Some(bad) = correct_arm
            .iter()
            .flatten()
            .find(|&&a| a as usize >= arms)
        {
            return Err(EnvError::BadSpec(format!(
                "correct arm {bad} out of range for {arms} arms"
            )));
        }
        if !(0.0..0.5).contains(&noise) {
            return Err(EnvError::BadSpec(format!(
                "noise must be in [0, 0.5), got {noise}"
            )));
        }
        Ok(Self {
            arms,
            correct_arm,
            noise,
            noise_seed,
        })
    }

    fn reward(&self, context: usize, response: &[u32]) -> Result<f64, EnvError> {
        if response.len() != 1 {
            return Err(EnvError::BadResponse(format!(
                "bandit expects a single arm choice, got length {}",
                response.len()
            )));
        }
        let arm = response[0];
        if arm as usize >= self.arms {
            return Err(EnvError::BadResponse(format!(
                "arm {arm} out of range for {} arms",
                self.arms
            )));
        }
        let base = match self.correct_arm[context] {
            None => 1.0,
            Some(correct) => {
                if arm == correct {
                    1.0
                } else {
                    0.0
                }
            }
        };
        if self.noise > 0.0 && hash_unit(self.noise_seed, context, response) < self.noise {
            Ok(1.0 - base)
        } else {
            Ok(base)
        }
    }
}

/// Fixed-length sequence matching: exact-match 0/1 reward, or the fraction
/// of positions matching the target when `partial_credit` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEnv {
    vocab: usize,
    length: usize,
    /// Per context: `Some(target)` for an ordinary context, `None` for a
    /// trivially-correct one.
    targets: Vec<Option<Vec<u32>>>,
    partial_credit: bool,
}

impl SequenceEnv {
    pub fn new(
        vocab: usize,
        length: usize,
        targets: Vec<Option<Vec<u32>>>,
        partial_credit: bool,
    ) -> Result<Self, EnvError> {
        if vocab < 2 {
            return Err(EnvError::BadSpec(format!("need vocab >= 2, got {vocab}")));
        }
        if length == 0 {
            return Err(EnvError::BadSpec("need length >= 1".into()));
        }
        if targets.is_empty() {
            return Err(EnvError::BadSpec("need at least one context".into()));
        }
        for t in targets.iter().flatten() {
            if t.len() != length {
                return Err(EnvError::BadSpec(format!(
                    "target length {} != env length {length}",
                    t.len()
                )));
            }
            if let Some(bad) = t.iter().find(|&&tok| tok as usize >= vocab) {
                return Err(EnvError::BadSpec(format!(
                    "target token {bad} out of range for vocab {vocab}"
                )));
            }
        }
        Ok(Self {
            vocab,
            length,
            targets,
            partial_credit,
        })
    }

    fn reward(&self, context: usize, response: &[u32]) -> Result<f64, EnvError> {
        if response.len() != self.length {
            return Err(EnvError::BadResponse(format!(
                "expected length {}, got {}",
                self.length,
                response.len()
            )));
        }
        if let Some(bad) = response.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(EnvError::BadResponse(format!(
                "token {bad} out of range for vocab {}",
                self.vocab
            )));
        }
        let Some(target) = &self.targets[context] else {
            return Ok(1.0);
        };
        let matching = response
            .iter()
            .zip(target)
            .filter(|(a, b)| a == b)
            .count();
        if self.partial_credit {
            Ok(matching as f64 / self.length as f64)
        } else {
            Ok(if matching == self.length { 1.0 } else { 0.0 })
        }
    }
}

/// The environment dispatch type consumed by the trainer and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Bandit(BanditEnv),
    Sequence(SequenceEnv),
}

impl Env {
    pub fn contexts(&self) -> usize {
        match self {
            Env::Bandit(e) => e.correct_arm.len(),
            Env::Sequence(e) => e.targets.len(),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Env::Bandit(e) => e.arms,
            Env::Sequence(e) => e.vocab,
        }
    }

    /// Length of a well-formed response; the trainer rolls out exactly
    /// this many tokens.
    pub fn response_len(&self) -> usize {
        match self {
            Env::Bandit(_) => 1,
            Env::Sequence(e) => e.length,
        }
    }

    /// Score one response. Pure in (context, response, seed): re-scoring a
    /// rollout always reproduces the same reward.
    pub fn reward(&self, context: usize, response: &[u32]) -> Result<f64, EnvError> {
        if context >= self.contexts() {
            return Err(EnvError::BadResponse(format!(
                "context {context} out of range ({} contexts)",
                self.contexts()
            )));
        }
        match self {
            Env::Bandit(e) => e.reward(context, response),
            Env::Sequence(e) => e.reward(context, response),
        }
    }

    /// A context is easy when any response scores 1.0.
    pub fn is_easy_context(&self, context: usize) -> bool {
        match self {
            Env::Bandit(e) => e.correct_arm[context].is_none(),
            Env::Sequence(e) => e.targets[context].is_none(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("bad environment spec: {0}")]
    BadSpec(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("difficulty mix: {0}")]
    BadMix(String),
}

/// Draws prompt contexts, optionally biased between easy and hard pools.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextSampler {
    /// Uniform over all contexts.
    Uniform { contexts: usize },
    /// Easy-pool contexts with probability `easy_fraction`, hard-pool
    /// contexts otherwise.
    Mix {
        easy: Vec<usize>,
        hard: Vec<usize>,
        easy_fraction: f64,
    },
}

impl ContextSampler {
    pub fn uniform(contexts: usize) -> Self {
        ContextSampler::Uniform { contexts }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            ContextSampler::Uniform { contexts } => rng.gen_range(0..*contexts),
            ContextSampler::Mix {
                easy,
                hard,
                easy_fraction,
            } => {
                let pick_easy = if easy.is_empty() {
                    false
                } else if hard.is_empty() {
                    true
                } else {
                    rng.gen::<f64>() < *easy_fraction
                };
                let pool = if pick_easy { easy } else { hard };
                pool[rng.gen_range(0..pool.len())]
            }
        }
    }
}

/// Partition the environment's contexts into easy and hard pools and
/// return a sampler that yields easy contexts with probability
/// `easy_fraction`. Groups drawn on easy contexts come back all-1; groups
/// on hard contexts come back all-0 with probability near 1 while the
/// policy's per-response solve rate is low, so the degenerate-group rate
/// of a batch tracks the mix.
pub fn difficulty_mix(env: &Env, easy_fraction: f64) -> Result<ContextSampler, EnvError> {
    if !(0.0..=1.0).contains(&easy_fraction) {
        return Err(EnvError::BadMix(format!(
            "easy_fraction must be in [0, 1], got {easy_fraction}"
        )));
    }
    let (easy, hard): (Vec<usize>, Vec<usize>) =
        (0..env.contexts()).partition(|&c| env.is_easy_context(c));
    if easy_fraction > 0.0 && easy.is_empty() {
        return Err(EnvError::BadMix(
            "easy_fraction > 0 but the environment has no easy contexts".into(),
        ));
    }
    if easy_fraction < 1.0 && hard.is_empty() {
        return Err(EnvError::BadMix(
            "easy_fraction < 1 but the environment has no hard contexts".into(),
        ));
    }
    Ok(ContextSampler::Mix {
        easy,
        hard,
        easy_fraction,
    })
}

/// Serializable environment description; builds an [`Env`] plus its
/// context sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvConfig {
    Bandit {
        contexts: usize,
        arms: usize,
        /// The first `easy_contexts` contexts reward every arm.
        #[serde(default)]
        easy_contexts: usize,
        /// Explicit correct arms for the non-easy contexts; defaults to
        /// `context % arms`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        correct_arms: Option<Vec<u32>>,
        #[serde(default)]
        noise: f64,
        /// When set, sample easy contexts with this probability instead of
        /// drawing contexts uniformly.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        easy_fraction: Option<f64>,
    },
    Sequence {
        contexts: usize,
        vocab: usize,
        length: usize,
        #[serde(default)]
        easy_contexts: usize,
        /// Explicit targets for the non-easy contexts; defaults to
        /// `token_t = (context + t) % vocab`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        targets: Option<Vec<Vec<u32>>>,
        #[serde(default)]
        partial_credit: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        easy_fraction: Option<f64>,
    },
}

impl EnvConfig {
    /// Instantiate the environment. `noise_seed` feeds the bandit's reward
    /// flips; it should come from the run's env-noise substream.
    pub fn build(&self, noise_seed: u64) -> Result<(Env, ContextSampler), EnvError> {
        match self {
            EnvConfig::Bandit {
                contexts,
                arms,
                easy_contexts,
                correct_arms,
                noise,
                easy_fraction,
            } => {
                if easy_contexts > contexts {
                    return Err(EnvError::BadSpec(format!(
                        "easy_contexts {easy_contexts} exceeds contexts {contexts}"
                    )));
                }
                let n_hard = contexts - easy_contexts;
                let hard_arms: Vec<u32> = match correct_arms {
                    Some(list) => {
                        if list.len() != n_hard {
                            return Err(EnvError::BadSpec(format!(
                                "correct_arms has {} entries but there are {n_hard} non-easy contexts",
                                list.len()
                            )));
                        }
                        list.clone()
                    }
                    None => (0..n_hard).map(|c| (c % arms) as u32).collect(),
                };
                let mut per_context = vec![None; *easy_contexts];
                per_context.extend(hard_arms.into_iter().map(Some));
                let env = Env::Bandit(BanditEnv::new(*arms, per_context, *noise, noise_seed)?);
                let sampler = match easy_fraction {
                    Some(f) => difficulty_mix(&env, *f)?,
                    None => ContextSampler::uniform(*contexts),
                };
                Ok((env, sampler))
            }
            EnvConfig::Sequence {
                contexts,
                vocab,
                length,
                easy_contexts,
                targets,
                partial_credit,
                easy_fraction,
            } => {
                if easy_contexts > contexts {
                    return Err(EnvError::BadSpec(format!(
                        "easy_contexts {easy_contexts} exceeds contexts {contexts}"
                    )));
                }
                let n_hard = contexts - easy_contexts;
                let hard_targets: Vec<Vec<u32>> = match targets {
                    Some(list) => {
                        if list.len() != n_hard {
                            return Err(EnvError::BadSpec(format!(
                                "targets has {} entries but there are {n_hard} non-easy contexts",
                                list.len()
                            )));
                        }
                        list.clone()
                    }
                    None => (0..n_hard)
                        .map(|c| (0..*length).map(|t| ((c + t) % vocab) as u32).collect())
                        .collect(),
                };
                let mut per_context = vec![None; *easy_contexts];
                per_context.extend(hard_targets.into_iter().map(Some));
                let env = Env::Sequence(SequenceEnv::new(
                    *vocab,
                    *length,
                    per_context,
                    *partial_credit,
                )?);
                let sampler = match easy_fraction {
                    Some(f) => difficulty_mix(&env, *f)?,
                    None => ContextSampler::uniform(*contexts),
                };
                Ok((env, sampler))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_bandit(arms: usize, correct: u32) -> Env {
        Env::Bandit(BanditEnv::new(arms, vec![Some(correct)], 0.0, 0).unwrap())
    }

    #[test]
    fn bandit_scores_correct_arm() {
        let env = plain_bandit(4, 2);
        assert_eq!(env.reward(0, &[2]).unwrap(), 1.0);
        assert_eq!(env.reward(0, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn bandit_rejects_malformed_responses() {
        let env = plain_bandit(4, 2);
        assert!(env.reward(0, &[2, 2]).is_err());
        assert!(env.reward(0, &[]).is_err());
        assert!(env.reward(0, &[4]).is_err());
        assert!(env.reward(1, &[0]).is_err());
    }

    #[test]
    fn bandit_noise_is_pure_and_roughly_calibrated() {
        let env = Env::Bandit(
            BanditEnv::new(2, (0..2000).map(|_| Some(0)).collect(), 0.25, 99).unwrap(),
        );
        let mut flips = 0;
        for ctx in 0..2000 {
            let r1 = env.reward(ctx, &[0]).unwrap();
            let r2 = env.reward(ctx, &[0]).unwrap();
            assert_eq!(r1, r2);
            assert!(r1 == 0.0 || r1 == 1.0);
            if r1 == 0.0 {
                flips += 1;
            }
        }
        let rate = flips as f64 / 2000.0;
        assert!((rate - 0.25).abs() < 0.05, "flip rate {rate}");
    }

    #[test]
    fn sequence_exact_match() {
        let env = Env::Sequence(
            SequenceEnv::new(4, 3, vec![Some(vec![1, 2, 3])], false).unwrap(),
        );
        assert_eq!(env.reward(0, &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(env.reward(0, &[1, 2, 0]).unwrap(), 0.0);
        assert!(env.reward(0, &[1, 2]).is_err());
    }

    #[test]
    fn sequence_partial_credit_fraction() {
        let env = Env::Sequence(
            SequenceEnv::new(4, 4, vec![Some(vec![0, 1, 2, 3])], true).unwrap(),
        );
        assert_eq!(env.reward(0, &[0, 1, 2, 0]).unwrap(), 0.75);
        assert_eq!(env.reward(0, &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(env.reward(0, &[1, 0, 3, 2]).unwrap(), 0.0);
    }

    #[test]
    fn rewards_stay_in_unit_interval() {
        let env = Env::Sequence(
            SequenceEnv::new(3, 2, vec![Some(vec![0, 1]), None], true).unwrap(),
        );
        for ctx in 0..2 {
            for a in 0..3u32 {
                for b in 0..3u32 {
                    let r = env.reward(ctx, &[a, b]).unwrap();
                    assert!((0.0..=1.0).contains(&r));
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(BanditEnv::new(1, vec![Some(0)], 0.0, 0).is_err());
        assert!(BanditEnv::new(2, vec![Some(2)], 0.0, 0).is_err());
        assert!(BanditEnv::new(2, vec![Some(0)], 0.5, 0).is_err());
        assert!(SequenceEnv::new(2, 2, vec![Some(vec![0])], false).is_err());
        assert!(SequenceEnv::new(2, 1, vec![Some(vec![3])], false).is_err());
    }

    fn degenerate_fraction(env: &Env, sampler: &ContextSampler, groups: usize, g: usize) -> f64 {
        let policy = PolicyParams::uniform(env.contexts(), env.response_len(), env.vocab());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut degenerate = 0usize;
        for _ in 0..groups {
            let ctx = sampler.sample(&mut rng);
            let responses = policy
                .sample_group(ctx, g, env.response_len(), &mut rng)
                .unwrap();
            let rewards: Vec<f64> = responses
                .iter()
                .map(|r| env.reward(ctx, r).unwrap())
                .collect();
            let all_same = rewards.iter().all(|r| *r == rewards[0]);
            if all_same {
                degenerate += 1;
            }
        }
        degenerate as f64 / groups as f64
    }

    #[test]
    fn all_easy_sampling_makes_every_group_degenerate() {
        let cfg = EnvConfig::Bandit {
            contexts: 4,
            arms: 2,
            easy_contexts: 2,
            correct_arms: None,
            noise: 0.0,
            easy_fraction: Some(1.0),
        };
        let (env, sampler) = cfg.build(0).unwrap();
        assert_eq!(degenerate_fraction(&env, &sampler, 50, 4), 1.0);
    }

    #[test]
    fn hard_exact_match_on_wide_vocab_is_mostly_all_zero() {
        // Solve rate 1/64 per response under the uniform policy; a group of
        // G = 8 is all-zero with probability (1 - 1/64)^8, about 0.88.
        let cfg = EnvConfig::Sequence {
            contexts: 2,
            vocab: 64,
            length: 1,
            easy_contexts: 0,
            targets: None,
            partial_credit: false,
            easy_fraction: Some(0.0),
        };
        let (env, sampler) = cfg.build(0).unwrap();
        let frac = degenerate_fraction(&env, &sampler, 400, 8);
        assert!(frac > 0.75, "all-zero fraction {frac}");
        assert!(frac < 0.98, "all-zero fraction {frac}");
    }

    #[test]
    fn mixture_interpolates_between_the_limits() {
        let make = |easy_fraction| EnvConfig::Bandit {
            contexts: 8,
            arms: 16,
            easy_contexts: 4,
            correct_arms: None,
            noise: 0.0,
            easy_fraction: Some(easy_fraction),
        };
        let (env_lo, s_lo) = make(0.0).build(0).unwrap();
        let (env_mid, s_mid) = make(0.5).build(0).unwrap();
        let (env_hi, s_hi) = make(1.0).build(0).unwrap();
        let lo = degenerate_fraction(&env_lo, &s_lo, 300, 8);
        let mid = degenerate_fraction(&env_mid, &s_mid, 300, 8);
        let hi = degenerate_fraction(&env_hi, &s_hi, 300, 8);
        assert!(lo <= mid && mid <= hi, "lo {lo} mid {mid} hi {hi}");
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn mix_requires_matching_pools() {
        let env = plain_bandit(2, 0);
        assert!(difficulty_mix(&env, 0.5).is_err());
        assert!(difficulty_mix(&env, 0.0).is_ok());
        let all_easy = Env::Bandit(BanditEnv::new(2, vec![None], 0.0, 0).unwrap());
        assert!(difficulty_mix(&all_easy, 0.5).is_err());
        assert!(difficulty_mix(&all_easy, 1.0).is_ok());
    }

    #[test]
    fn env_config_default_arms_and_targets() {
        let (env, _) = EnvConfig::Bandit {
            contexts: 3,
            arms: 2,
            easy_contexts: 0,
            correct_arms: None,
            noise: 0.0,
            easy_fraction: None,
        }
        .build(0)
        .unwrap();
        assert_eq!(env.reward(0, &[0]).unwrap(), 1.0);
        assert_eq!(env.reward(1, &[1]).unwrap(), 1.0);
        assert_eq!(env.reward(2, &[0]).unwrap(), 1.0);
        assert_eq!(env.reward(2, &[1]).unwrap(), 0.0);
    }
}
