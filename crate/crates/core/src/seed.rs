//! Seed splitting.
//!
//! A per-scenario seed is the first 8 bytes (little endian) of
//! `SHA-256(master_seed as 8 LE bytes || scenario_id as UTF-8)`. Adding a
//! scenario never perturbs the seeds of the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, scenario_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(scenario_id.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// The generator used everywhere randomness is needed; portable across platforms.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
