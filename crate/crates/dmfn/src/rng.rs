//! Deterministic seed derivation.
//!
//! Every random decision in a run is drawn from a stream keyed by
//! `(master seed, purpose, index)`. Streams are stateless, so resuming at
//! iteration `k` reproduces exactly the draws of an uninterrupted run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from the master seed, a purpose label and an index.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A fresh deterministic generator for `(master, purpose, index)`.
pub fn rng_for(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, index))
}
