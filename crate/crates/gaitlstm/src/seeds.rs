//! Labeled sub-seed derivation.
//!
//! Every source of randomness in a run (split shuffling, weight init,
//! epoch shuffles, dropout masks) takes its own sub-seed derived from the
//! single user-facing seed plus a fixed string label. Changing one stage's
//! stream is impossible without changing its label, which keeps runs
//! auditable and bit-reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; the standard avalanche mix.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a base seed and a stage label.
pub fn subseed(base: u64, label: &str) -> u64 {
    let mut h = mix(base ^ 0x6c62_272e_07bb_0142);
    for &b in label.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    h
}

/// Derive a sub-seed that also depends on one or two counters
/// (epoch, position within the epoch, ...).
pub fn subseed_n(base: u64, label: &str, counters: &[u64]) -> u64 {
    let mut h = subseed(base, label);
    for &c in counters {
        h = mix(h ^ c);
    }
    h
}

/// Deterministic generator for a labeled stage.
pub fn rng_for(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(base, label))
}

/// Deterministic generator for a labeled stage at given counters.
pub fn rng_for_n(base: u64, label: &str, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed_n(base, label, counters))
}
