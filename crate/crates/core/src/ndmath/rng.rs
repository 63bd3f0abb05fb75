//! Project-wide deterministic generator.
//!
//! Every stochastic step (initialization, shuffles, dropout masks, latent
//! draws, subset selection) uses ChaCha8 seeded from a `u64`.

use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derive an independent child seed: the first 8 bytes (little-endian) of
/// SHA-256 over the master seed followed by each part, all as LE `u64`s.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}
