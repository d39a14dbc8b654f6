//! Seeded random-number plumbing.
//!
//! All randomness in a run flows from a single root seed. Each component
//! draws from its own named substream so that, e.g., adding an extra
//! rollout does not shift the environment-noise stream of later steps.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash. Stable across platforms and releases, unlike
/// `std::collections::hash_map::DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A reproducible generator for the named substream of `root_seed`.
///
/// The ChaCha stream id carries the substream name, so substreams of the
/// same root seed are statistically independent of each other.
pub fn substream(root_seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Hash a (seed, context, token-sequence) triple into a uniform value in [0, 1).
///
/// Used for reward noise: the flip decision is a pure function of its
/// inputs, so re-scoring a rollout always reproduces the same reward.
pub fn hash_unit(seed: u64, context: usize, tokens: &[u32]) -> f64 {
    let mut bytes = Vec::with_capacity(16 + tokens.len() * 4);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&(context as u64).to_le_bytes());
    for &t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    let h = fnv1a(&bytes);
    // Top 53 bits give a uniform dyadic rational in [0, 1).
    (h >> 11) as f64 / (1u64 << 53) as f64
}
