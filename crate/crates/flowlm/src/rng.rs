//! Deterministic random streams derived from a single root seed.
//!
//! Every source of randomness in the pipeline (parameter init, segment
//! sampling, masking, dropout, split generation) draws from its own named
//! stream so that consuming one stream never shifts another. Training streams
//! are additionally derived per step, which makes checkpoint resume exact:
//! the stream for step `t` depends only on `(root_seed, name, t)`.
//!
//! Derivation: the stream name is hashed with FNV-1a, XORed into the root
//! seed, and the result is whitened with SplitMix64 before seeding a
//! ChaCha8 generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the named child stream of `root`.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a64(name.as_bytes()))
}

/// Generator for the named child stream of `root`.
pub fn stream_rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, name))
}

/// Generator for one training step of the named stream. Used so that resuming
/// from a checkpoint at step `t` replays exactly the stream a straight run
/// would have used.
pub fn step_rng(root: u64, name: &str, step: u64) -> ChaCha8Rng {
    let base = stream_seed(root, name);
    ChaCha8Rng::seed_from_u64(splitmix64(base ^ splitmix64(step)))
}
