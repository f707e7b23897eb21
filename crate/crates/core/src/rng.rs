//! Seed plumbing. Every random decision in the crate flows from a named
//! substream so that unrelated components never share rng state (e.g. the
//! unlabelled-data pipeline must not perturb arch sampling).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a over a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A deterministic rng derived from `seed` and a purpose tag. Identical
/// (seed, tag) pairs yield identical streams on every platform.
pub fn substream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut state = seed.to_le_bytes().to_vec();
    state.extend_from_slice(tag.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&state))
}

/// Stable hash of an arbitrary string mixed with a seed; used to give each
/// scored candidate its own reproducible rng regardless of sampling order.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut state = seed.to_le_bytes().to_vec();
    state.extend_from_slice(tag.as_bytes());
    fnv1a(&state)
}
