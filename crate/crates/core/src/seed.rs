//! Seed expansion: one experiment seed fans out into independent per-stage
//! streams so any stage can be rerun in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `parent` and a stage label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(parent: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(parent, label))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Per-item stream, e.g. one per training example or test sentence.
pub fn item_rng(parent: u64, label: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}
