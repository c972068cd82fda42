//! Deterministic sub-seed derivation.
//!
//! All randomness flows from one u64 seed. Independent components draw from
//! independent streams derived by hashing the seed with a label and
//! length-prefixed context parts (user id, auction period), so the same seed
//! reproduces every file and every sampled price bit for bit, regardless of
//! evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub fn sub_seed(seed: u64, label: &str, parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.finalize().into()
}

pub fn rng_for(seed: u64, label: &str, parts: &[&str]) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(sub_seed(seed, label, parts))
}
