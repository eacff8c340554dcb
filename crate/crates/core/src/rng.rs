//! Deterministic per-instance random streams. Every stream is a pure
//! function of (master seed, instance index, purpose tag), so corpora
//! regenerate bit-exactly regardless of thread count or generation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes; distinct tags keep draws independent.
pub mod tag {
    pub const NAV_MAP: u64 = 1;
    pub const MANIP_ENV: u64 = 2;
    pub const GOAL: u64 = 3;
    pub const SUPERVISION: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}

/// Seeded stream for one (instance, purpose) pair.
pub fn stream(master_seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
