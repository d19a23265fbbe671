//! Deterministic seed derivation shared by every stochastic component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th unit of work under `base`; independent of scheduling order.
pub fn derive(base: u64, index: u64) -> u64 {
    mix(mix(base) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Stable 64-bit hash of a string (first eight bytes of SHA-256).
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 over a sequence of floats, bitwise.
pub fn fingerprint_f64<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        for v in part {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
