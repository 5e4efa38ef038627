//! Seeded random number generation.
//!
//! All stochastic components (weight init, dropout, mask generation, batch
//! shuffling) draw from ChaCha8 streams derived from a base seed and a list
//! of stream labels. Derivation is stateless: the same (seed, labels) pair
//! always yields the same stream, which is what makes mask fixtures portable
//! and training resumable without serializing generator internals.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step, used to fold stream labels into the base seed.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from a base seed and stream labels.
pub fn derive(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &l in labels {
        state ^= l;
        acc ^= splitmix64(&mut state).rotate_left(17);
    }
    let mut key = [0u8; 32];
    let mut s = acc;
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
