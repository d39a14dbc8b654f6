//! Tabular autoregressive categorical policy with analytic gradients.
//!
//! Logits are stored per (context, position, token); the token at position t
//! is drawn from `softmax(logits[ctx, t, :])` independently of earlier
//! tokens. This keeps the parameter count at `contexts * positions * vocab`
//! and makes exact enumeration and finite-difference verification cheap,
//! while exercising the same estimator math as a sequence model.

use std::io::{self, BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{clip_term_dlogp, kl_k3_dlogp, Algorithm, LossConfig, LossError, TokenBatch};

/// Dense (context, position, token) table of reals. Shared shape for
/// logits, gradients, and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    contexts: usize,
    positions: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn zeros(contexts: usize, positions: usize, vocab: usize) -> Self {
        Self {
            contexts,
            positions,
            vocab,
            data: vec![0.0; contexts * positions * vocab],
        }
    }

    pub fn zeros_like(other: &Table) -> Self {
        Self::zeros(other.contexts, other.positions, other.vocab)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.contexts, self.positions, self.vocab)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn idx(&self, context: usize, position: usize, token: usize) -> usize {
        debug_assert!(context < self.contexts && position < self.positions && token < self.vocab);
        (context * self.positions + position) * self.vocab + token
    }

    #[inline]
    pub fn get(&self, context: usize, position: usize, token: usize) -> f64 {
        self.data[self.idx(context, position, token)]
    }

    #[inline]
    pub fn set(&mut self, context: usize, position: usize, token: usize, value: f64) {
        let i = self.idx(context, position, token);
        self.data[i] = value;
    }

    #[inline]
    pub fn add(&mut self, context: usize, position: usize, token: usize, value: f64) {
        let i = self.idx(context, position, token);
        self.data[i] += value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Table) -> bool {
        self.shape() == other.shape()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry; 0 for an empty table.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// The policy's parameters: one logit per (context, position, token).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    logits: Table,
}

pub const CHECKPOINT_HEADER: &str = "gpg-policy-checkpoint v1";

impl PolicyParams {
    /// All-zero logits: the uniform policy at every position.
    pub fn uniform(contexts: usize, positions: usize, vocab: usize) -> Self {
        Self {
            logits: Table::zeros(contexts, positions, vocab),
        }
    }

    /// Independent N(0, scale^2) logits.
    pub fn random<R: Rng>(
        contexts: usize,
        positions: usize,
        vocab: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::uniform(contexts, positions, vocab);
        for v in p.logits.data_mut() {
            // Box-Muller keeps us off rand_distr for one distribution.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            *v = scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        p
    }

    pub fn contexts(&self) -> usize {
        self.logits.contexts
    }

    pub fn positions(&self) -> usize {
        self.logits.positions
    }

    pub fn vocab(&self) -> usize {
        self.logits.vocab
    }

    pub fn logits(&self) -> &Table {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Table {
        &mut self.logits
    }

    fn check_context(&self, context: usize) -> Result<(), PolicyError> {
        if context >= self.contexts() {
            return Err(PolicyError::BadDimensions(format!(
                "context {context} out of range (contexts = {})",
                self.contexts()
            )));
        }
        Ok(())
    }

    /// Softmax token distribution at (context, position).
    pub fn token_probs(&self, context: usize, position: usize) -> Vec<f64> {
        let row: Vec<f64> = (0..self.vocab())
            .map(|t| self.logits.get(context, position, t))
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    /// Probability of one token at (context, position).
    pub fn token_prob(&self, context: usize, position: usize, token: u32) -> f64 {
        self.token_probs(context, position)[token as usize]
    }

    /// Per-token log-probabilities of `sequence` under this policy.
    /// Entry t is `log softmax(logits[context, t, :])[sequence[t]]`; always <= 0.
    pub fn logprob(&self, context: usize, sequence: &[u32]) -> Result<Vec<f64>, PolicyError> {
        self.check_context(context)?;
        if sequence.len() > self.positions() {
            return Err(PolicyError::BadDimensions(format!(
                "sequence length {} exceeds table positions {}",
                sequence.len(),
                self.positions()
            )));
        }
        let mut out = Vec::with_capacity(sequence.len());
        for (pos, &tok) in sequence.iter().enumerate() {
            if tok as usize >= self.vocab() {
                return Err(PolicyError::TokenOutOfRange {
                    token: tok,
                    vocab: self.vocab(),
                });
            }
            let row: Vec<f64> = (0..self.vocab())
                .map(|t| self.logits.get(context, pos, t))
                .collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.push(row[tok as usize] - lse);
        }
        Ok(out)
    }

    /// Draw `group_size` independent sequences of length `len`, token by
    /// token. Deterministic given the generator state.
    pub fn sample_group<R: Rng>(
        &self,
        context: usize,
        group_size: usize,
        len: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<u32>>, PolicyError> {
        self.check_context(context)?;
        if group_size < 2 {
            return Err(PolicyError::BadDimensions(format!(
                "group size must be >= 2, got {group_size}"
            )));
        }
        if len == 0 || len > self.positions() {
            return Err(PolicyError::BadDimensions(format!(
                "rollout length {len} outside 1..={}",
                self.positions()
            )));
        }
        let mut group = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let mut seq = Vec::with_capacity(len);
            for pos in 0..len {
                let probs = self.token_probs(context, pos);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = self.vocab() - 1;
                for (t, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = t;
                        break;
                    }
                }
                seq.push(chosen as u32);
            }
            group.push(seq);
        }
        Ok(group)
    }

    /// Write the parameter table as a versioned plain-text checkpoint.
    /// Values use Rust's shortest round-trip float formatting.
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        writeln!(
            w,
            "contexts {} positions {} vocab {}",
            self.contexts(),
            self.positions(),
            self.vocab()
        )?;
        for v in self.logits.data() {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Parse a checkpoint written by [`Self::save_checkpoint`].
    pub fn load_checkpoint<R: BufRead>(r: R) -> Result<Self, PolicyError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| PolicyError::Checkpoint("empty file".into()))?
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if header != CHECKPOINT_HEADER {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported header {header:?}"
            )));
        }
        let dims = lines
            .next()
            .ok_or_else(|| PolicyError::Checkpoint("missing dimensions".into()))?
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let parts: Vec<&str> = dims.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "contexts" || parts[2] != "positions" || parts[4] != "vocab"
        {
            return Err(PolicyError::Checkpoint(format!("bad dimension line {dims:?}")));
        }
        let parse = |s: &str| -> Result<usize, PolicyError> {
            s.parse()
                .map_err(|_| PolicyError::Checkpoint(format!("bad dimension {s:?}")))
        };
        let (c, p, v) = (parse(parts[1])?, parse(parts[3])?, parse(parts[5])?);
        let mut out = Self::uniform(c, p, v);
        let data = out.logits.data_mut();
        for (i, slot) in data.iter_mut().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| PolicyError::Checkpoint(format!("truncated at value {i}")))?
                .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
            *slot = line
                .trim()
                .parse()
                .map_err(|_| PolicyError::Checkpoint(format!("bad value {line:?}")))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("gradient and parameter shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("non-finite gradient; parameters left untouched")]
    NonFiniteGradient,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Recompute every response's `logp_cur` from `params`, leaving old/ref
/// log-probs, advantages and alpha untouched. This is how the surrogate
/// losses become functions of the parameters for finite differencing.
pub fn refresh_logp_cur(params: &PolicyParams, batch: &TokenBatch) -> Result<TokenBatch, PolicyError> {
    let mut out = batch.clone();
    for group in &mut out.groups {
        for resp in group {
            resp.logp_cur = params.logprob(resp.context, &resp.tokens)?;
        }
    }
    Ok(out)
}

fn check_batch_shapes(params: &PolicyParams, batch: &TokenBatch) -> Result<(), PolicyError> {
    for resp in batch.responses() {
        if resp.context >= params.contexts() {
            return Err(PolicyError::BadDimensions(format!(
                "batch context {} out of range (contexts = {})",
                resp.context,
                params.contexts()
            )));
        }
        if resp.tokens.len() > params.positions() {
            return Err(PolicyError::BadDimensions(format!(
                "response length {} exceeds table positions {}",
                resp.tokens.len(),
                params.positions()
            )));
        }
        if let Some(&t) = resp.tokens.iter().find(|&&t| t as usize >= params.vocab()) {
            return Err(PolicyError::TokenOutOfRange {
                token: t,
                vocab: params.vocab(),
            });
        }
    }
    Ok(())
}

/// Accumulate `coeff * (onehot(token) - softmax)` rows into `grad`.
/// `coeff` is d(loss)/d(logp) for one token; the softmax log-gradient
/// `d logp(k) / d logit(j) = 1{j=k} - p(j)` distributes it over the row.
fn accumulate_token(
    grad: &mut Table,
    probs: &[f64],
    context: usize,
    position: usize,
    token: u32,
    coeff: f64,
) {
    if coeff == 0.0 {
        return;
    }
    for (j, &p) in probs.iter().enumerate() {
        let indicator = if j == token as usize { 1.0 } else { 0.0 };
        grad.add(context, position, j, coeff * (indicator - p));
    }
}

/// Exact gradient of [`losses::gpg_loss`] with respect to every logit.
pub fn grad_logprob_weighted(
    params: &PolicyParams,
    batch: &TokenBatch,
) -> Result<Table, PolicyError> {
    check_batch_shapes(params, batch)?;
    let total = batch.total_tokens();
    if total == 0 {
        return Err(LossError::ZeroTokens.into());
    }
    let scale = -1.0 / total as f64;
    let mut grad = Table::zeros_like(params.logits());
    for resp in batch.responses() {
        if resp.advantage == 0.0 {
            continue;
        }
        for (pos, &tok) in resp.tokens.iter().enumerate() {
            let probs = params.token_probs(resp.context, pos);
            accumulate_token(&mut grad, &probs, resp.context, pos, tok, scale * resp.advantage);
        }
    }
    // Alpha scales the finished table so the gradient is exactly linear in it.
    for v in grad.data_mut() {
        *v *= batch.alpha;
    }
    Ok(grad)
}

/// Exact gradient of [`losses::surrogate_loss`] for any configured
/// algorithm. Old/reference log-probs are treated as constants.
pub fn grad_loss(
    params: &PolicyParams,
    batch: &TokenBatch,
    cfg: &LossConfig,
) -> Result<Table, PolicyError> {
    cfg.validate()?;
    if cfg.algorithm == Algorithm::Gpg {
        return grad_logprob_weighted(params, batch);
    }
    check_batch_shapes(params, batch)?;
    let total = batch.total_tokens();
    if total == 0 {
        return Err(LossError::ZeroTokens.into());
    }
    let mut grad = Table::zeros_like(params.logits());
    let n_groups = batch.groups.len() as f64;

    for group in &batch.groups {
        let group_size = group.len() as f64;
        for resp in group {
            let old = resp
                .logp_old
                .as_deref()
                .ok_or(LossError::MissingOldLogProbs("surrogate gradient"))?;
            let refs = match cfg.algorithm {
                Algorithm::Grpo if cfg.kl_beta > 0.0 => {
                    Some(resp.logp_ref.as_deref().ok_or(LossError::MissingRefLogProbs)?)
                }
                _ => None,
            };
            let weight = match cfg.algorithm {
                Algorithm::Grpo => 1.0 / (n_groups * group_size * resp.len() as f64),
                _ => 1.0 / total as f64,
            };
            let (eps_low, eps_high) = match cfg.algorithm {
                Algorithm::Dapo => (cfg.clip_eps_low, cfg.clip_eps_high),
                _ => (cfg.clip_eps, cfg.clip_eps),
            };
            for (pos, &tok) in resp.tokens.iter().enumerate() {
                let lp = resp.logp_cur[pos];
                let ratio = (lp - old[pos]).exp();
                let mut dlogp = clip_term_dlogp(ratio, resp.advantage, eps_low, eps_high);
                if let Some(refs) = refs {
                    dlogp -= cfg.kl_beta * kl_k3_dlogp(lp, refs[pos]);
                }
                let coeff = -weight * dlogp;
                let probs = params.token_probs(resp.context, pos);
                accumulate_token(&mut grad, &probs, resp.context, pos, tok, coeff);
            }
        }
    }
    Ok(grad)
}

/// Central-difference gradient of an arbitrary scalar function of the
/// parameters: `(f(theta + h e_i) - f(theta - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(loss_fn: F, params: &PolicyParams, h: f64) -> Table
where
    F: Fn(&PolicyParams) -> f64,
{
    let mut perturbed = params.clone();
    let mut grad = Table::zeros_like(params.logits());
    for i in 0..params.logits().len() {
        let base = params.logits().data()[i];
        perturbed.logits_mut().data_mut()[i] = base + h;
        let up = loss_fn(&perturbed);
        perturbed.logits_mut().data_mut()[i] = base - h;
        let down = loss_fn(&perturbed);
        perturbed.logits_mut().data_mut()[i] = base;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// First-order optimizers over parameter tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptKind {
    Sgd,
    #[default]
    Adam,
}

/// Serializable optimizer settings (the runtime state lives in
/// [`OptimizerState`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptKind::Adam,
            learning_rate: 1e-2,
            weight_decay: 0.0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its accumulated state (Adam moments, step counter).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Option<Table>,
    second_moment: Option<Table>,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig) -> Result<Self, PolicyError> {
        if !cfg.learning_rate.is_finite() || cfg.learning_rate <= 0.0 {
            return Err(PolicyError::BadDimensions(format!(
                "learning rate must be positive, got {}",
                cfg.learning_rate
            )));
        }
        if cfg.weight_decay.is_nan() || cfg.weight_decay < 0.0 {
            return Err(PolicyError::BadDimensions(format!(
                "weight decay must be >= 0, got {}",
                cfg.weight_decay
            )));
        }
        Ok(Self {
            kind: cfg.kind,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            step: 0,
            first_moment: None,
            second_moment: None,
        })
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerConfig {
            kind: OptKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
        })
        .expect("positive learning rate")
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerConfig {
            kind: OptKind::Adam,
            learning_rate,
            weight_decay: 0.0,
        })
        .expect("positive learning rate")
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Apply one optimizer update in place. A non-finite gradient (or shape
/// mismatch) is an error and leaves both parameters and state untouched.
pub fn apply_update(
    params: &mut PolicyParams,
    grad: &Table,
    opt: &mut OptimizerState,
) -> Result<(), PolicyError> {
    if !grad.same_shape(params.logits()) {
        return Err(PolicyError::ShapeMismatch(
            grad.shape(),
            params.logits().shape(),
        ));
    }
    if !grad.all_finite() {
        return Err(PolicyError::NonFiniteGradient);
    }
    let lr = opt.learning_rate;
    let wd = opt.weight_decay;
    match opt.kind {
        OptKind::Sgd => {
            let data = params.logits_mut().data_mut();
            for (theta, &g) in data.iter_mut().zip(grad.data()) {
                *theta -= lr * (g + wd * *theta);
            }
        }
        OptKind::Adam => {
            if opt.first_moment.is_none() {
                opt.first_moment = Some(Table::zeros_like(grad));
                opt.second_moment = Some(Table::zeros_like(grad));
            }
            opt.step += 1;
            let t = opt.step as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let m = opt.first_moment.as_mut().unwrap().data_mut();
            let v = opt.second_moment.as_mut().unwrap().data_mut();
            let data = params.logits_mut().data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i] + wd * data[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}
