//! Named, splittable random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Independent stream for `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    indexed(seed, name, 0)
}

/// Independent stream for the `index`-th item of `name` under `seed`.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed, for handing to code that takes a plain `u64`.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    stream(seed, name).next_u64()
}
