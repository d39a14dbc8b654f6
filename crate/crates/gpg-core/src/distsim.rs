//! Simulated data-parallel gradient averaging with invalid samples.
//!
//! Each worker holds K assigned samples of which some are invalid and
//! contribute no gradient. Conventional averaging divides each worker's
//! valid-gradient sum by the assigned count K and then averages across
//! workers, which equals `(1/B) * sum(G_i)` and underestimates the true
//! valid-sample mean `(1/S) * sum(G_i)` by exactly the factor S/B.
//! Rescaling the conventional estimate by `alpha = B/S` recovers the true
//! mean without gathering valid samples across workers.

use serde::Serialize;
use thiserror::Error;

/// One worker's share of the batch: `assigned` samples of which only
/// `gradients.len()` produced a (valid) gradient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerShard {
    pub assigned: usize,
    pub gradients: Vec<Vec<f64>>,
}

impl WorkerShard {
    pub fn new(assigned: usize, gradients: Vec<Vec<f64>>) -> Result<Self, DistsimError> {
        if gradients.len() > assigned {
            return Err(DistsimError::BadShard(format!(
                "{} valid gradients exceed {assigned} assigned samples",
                gradients.len()
            )));
        }
        Ok(Self { assigned, gradients })
    }

    /// Invalid samples on this worker (M_i).
    pub fn invalid(&self) -> usize {
        self.assigned - self.gradients.len()
    }

    /// Component-wise sum of the valid gradients (G_i).
    fn gradient_sum(&self, dim: usize) -> Vec<f64> {
        let mut sum = vec![0.0; dim];
        for g in &self.gradients {
            for (s, v) in sum.iter_mut().zip(g) {
                *s += v;
            }
        }
        sum
    }
}

/// The two estimates, the corrected one, and the counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AverageReport {
    /// Conventional estimate: mean over workers of (G_i / K).
    pub naive_avg: Vec<f64>,
    /// Valid-sample mean: (1/S) * sum(G_i).
    pub true_avg: Vec<f64>,
    /// alpha-corrected naive estimate, alpha = B/S.
    pub corrected_avg: Vec<f64>,
    /// Total assigned samples (B).
    pub total: usize,
    /// Valid samples (S).
    pub valid: usize,
    /// S / B.
    pub ratio: f64,
}

#[derive(Debug, Error)]
pub enum DistsimError {
    #[error("bad worker shard: {0}")]
    BadShard(String),
    #[error("shards disagree: {0}")]
    ShapeMismatch(String),
    #[error("no valid samples across any worker")]
    NoValidSamples,
    #[error(
        "averaging identity violated: max |naive - true*(S/B)| = {scaled_dev:e}, \
         max |alpha*naive - true| = {corrected_dev:e}"
    )]
    IdentityViolation {
        scaled_dev: f64,
        corrected_dev: f64,
        naive_avg: Vec<f64>,
        true_avg: Vec<f64>,
    },
}

/// Tolerance for the floating-point form of the exact identity.
pub const IDENTITY_TOL: f64 = 1e-12;

fn check_shards(shards: &[WorkerShard]) -> Result<usize, DistsimError> {
    if shards.is_empty() {
        return Err(DistsimError::ShapeMismatch("no shards".into()));
    }
    let k = shards[0].assigned;
    if k == 0 {
        return Err(DistsimError::BadShard("workers must be assigned samples".into()));
    }
    let dim = shards
        .iter()
        .flat_map(|s| s.gradients.first())
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    for (i, s) in shards.iter().enumerate() {
        if s.assigned != k {
            return Err(DistsimError::ShapeMismatch(format!(
                "worker {i} assigned {} samples, expected {k}",
                s.assigned
            )));
        }
        if let Some(bad) = s.gradients.iter().find(|g| g.len() != dim) {
            return Err(DistsimError::ShapeMismatch(format!(
                "worker {i} gradient dimension {} != {dim}",
                bad.len()
            )));
        }
    }
    Ok(dim)
}

/// Conventional distributed average: each worker divides its valid-gradient
/// sum by its assigned count, then the per-worker means are averaged.
pub fn naive_average(shards: &[WorkerShard]) -> Result<Vec<f64>, DistsimError> {
    let dim = check_shards(shards)?;
    let n = shards.len() as f64;
    let mut out = vec![0.0; dim];
    for shard in shards {
        let local = shard.gradient_sum(dim);
        for (o, v) in out.iter_mut().zip(&local) {
            *o += v / shard.assigned as f64;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// The same merge with the per-worker local means computed on real threads,
/// combined in worker order. Bitwise-identical to [`naive_average`].
pub fn naive_average_parallel(shards: &[WorkerShard]) -> Result<Vec<f64>, DistsimError> {
    let dim = check_shards(shards)?;
    let n = shards.len() as f64;
    let locals: Vec<Vec<f64>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| {
                scope.spawn(move || {
                    let mut local = shard.gradient_sum(dim);
                    for v in &mut local {
                        *v /= shard.assigned as f64;
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut out = vec![0.0; dim];
    for local in &locals {
        for (o, v) in out.iter_mut().zip(local) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// Mean gradient over valid samples only: `(1/S) * sum(G_i)`.
pub fn true_average(shards: &[WorkerShard]) -> Result<Vec<f64>, DistsimError> {
    let dim = check_shards(shards)?;
    let valid: usize = shards.iter().map(|s| s.gradients.len()).sum();
    if valid == 0 {
        return Err(DistsimError::NoValidSamples);
    }
    let mut out = vec![0.0; dim];
    for shard in shards {
        let local = shard.gradient_sum(dim);
        for (o, v) in out.iter_mut().zip(&local) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= valid as f64;
    }
    Ok(out)
}

/// Compute both estimates and assert the proportionality identity
/// `naive = true * (S/B)` together with its correction `alpha * naive = true`
/// (alpha = B/S), each to [`IDENTITY_TOL`] in the max norm.
pub fn verify_identity(shards: &[WorkerShard]) -> Result<AverageReport, DistsimError> {
    let naive = naive_average(shards)?;
    let truth = true_average(shards)?;
    let total: usize = shards.iter().map(|s| s.assigned).sum();
    let valid: usize = shards.iter().map(|s| s.gradients.len()).sum();
    let ratio = valid as f64 / total as f64;
    let alpha = total as f64 / valid as f64;

    let corrected: Vec<f64> = naive.iter().map(|v| alpha * v).collect();
    let scaled_dev = naive
        .iter()
        .zip(&truth)
        .map(|(n, t)| (n - t * ratio).abs())
        .fold(0.0, f64::max);
    let corrected_dev = corrected
        .iter()
        .zip(&truth)
        .map(|(c, t)| (c - t).abs())
        .fold(0.0, f64::max);
    if scaled_dev > IDENTITY_TOL || corrected_dev > IDENTITY_TOL {
        return Err(DistsimError::IdentityViolation {
            scaled_dev,
            corrected_dev,
            naive_avg: naive,
            true_avg: truth,
        });
    }
    Ok(AverageReport {
        naive_avg: naive,
        true_avg: truth,
        corrected_avg: corrected,
        total,
        valid,
        ratio,
    })
}
