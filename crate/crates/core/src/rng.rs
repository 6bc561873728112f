//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(seed, domain, index)`. A bootstrap replicate or a simulation replication
//! therefore sees the same numbers no matter which worker runs it or in what
//! order replicates are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Stream domains. Distinct domains never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Bootstrap = 0x6f6f_7473,
    Simulation = 0x7369_6d75,
    TestSeed = 0x7465_7374,
    Start = 0x7374_6172,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random stream for replicate `index` of `domain` under `seed`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ (domain as u64).rotate_left(32);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derives a child seed, e.g. the bootstrap seed of simulation replication `index`.
pub fn derive_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    let mut state = seed ^ (domain as u64).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ index.rotate_left(17);
    splitmix64(&mut state);
    splitmix64(&mut state)
}
