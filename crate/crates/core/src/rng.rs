//! Keyed random streams. Every consumer derives its own generator from the
//! master seed plus a purpose label and ids, so results do not depend on call
//! order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: &str, ids: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    for id in ids {
        h.update(id.to_le_bytes());
    }
    Rng::from_seed(h.finalize().into())
}

/// Stable 64-bit key for a string (first 8 bytes of its SHA-256).
pub fn key_of(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
