//! Seed derivation for reproducible, worker-count-independent streams.
//!
//! Every unit of work (trajectory, batch sample, experiment cell) owns an rng
//! derived from the master seed and its stable indices, so outputs do not
//! depend on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for seed mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministically combine a master seed with a tag path.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = mix(master);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

/// Stream rng for `(master, tags...)`.
pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
