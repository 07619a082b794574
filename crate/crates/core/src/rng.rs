//! Deterministic seed derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! derived from a global seed plus a stream tag and positional indices
//! (step, batch slot, clip index, ...). Derivation is stateless, so any part
//! of a run can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of the same global seed apart.
pub mod stream {
    pub const DATASET_CLIP: u64 = 0x01;
    pub const BATCH_SAMPLE: u64 = 0x02;
    pub const SHUFFLE_MIX: u64 = 0x03;
    pub const CONDITION_NOISE: u64 = 0x04;
    pub const MODEL_INIT: u64 = 0x05;
    pub const EVAL_PAIRING: u64 = 0x06;
    pub const ENCODER_PROJECTION: u64 = 0x07;
    pub const ENCODER_CENTROID: u64 = 0x08;
    pub const TEXT_JITTER: u64 = 0x09;
    pub const TEXT_UNKNOWN: u64 = 0x0a;
    pub const GAP_OFFSET: u64 = 0x0b;
    pub const CLIP_CAPTION: u64 = 0x0c;
    pub const VALIDATION_SPLIT: u64 = 0x0d;
}

/// SplitMix64 step; the standard finalizer-based mixer.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold a sequence of indices into one 64-bit seed.
pub fn derive_seed(global: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(global);
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    s
}

/// ChaCha stream for a derived seed.
pub fn derived_rng(global: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, parts))
}

/// FNV-1a over a byte string. Used for caption keys in the embedding
/// exchange format and for per-caption jitter seeding.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_seed_is_deterministic_and_order_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn derived_rng_reproduces_stream() {
        let mut a = derived_rng(42, &[stream::SHUFFLE_MIX, 3]);
        let mut b = derived_rng(42, &[stream::SHUFFLE_MIX, 3]);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn fnv1a_known_value() {
        // FNV-1a of empty input is the offset basis.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_ne!(fnv1a(b"The sound of rain"), fnv1a(b"The sound of bell"));
    }
}
