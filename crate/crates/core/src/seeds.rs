//! Seed derivation. Every stochastic consumer draws from its own stream,
//! keyed by a label and derived from the single master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Child seed = first eight bytes (little endian) of SHA-256(master || label).
pub fn child_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, label: &str) -> SimRng {
    SimRng::seed_from_u64(child_seed(master, label))
}
