//! Deterministic derivation of independent random streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(seed, agent, phase, iteration)`, so the order in which worker threads
//! are scheduled never changes the numbers any agent sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Sampling phase a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    PolicyInit = 1,
    CriticInit = 2,
    Sampling = 3,
    Evaluation = 4,
    Perturbation = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, agent: usize, phase: Phase, iteration: usize) -> u64 {
    let mut h = splitmix(seed);
    for word in [agent as u64, phase as u64, iteration as u64] {
        h = splitmix(h ^ word);
    }
    h
}

pub fn stream(seed: u64, agent: usize, phase: Phase, iteration: usize) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(seed, agent, phase, iteration))
}
