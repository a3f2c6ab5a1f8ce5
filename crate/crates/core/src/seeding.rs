//! Stable digests and seed derivation.
//!
//! Every random draw in the crate goes through [`rng_for`], which seeds a
//! ChaCha8 generator from a SHA-256 of a domain tag plus the integers that
//! identify the draw. Results therefore never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Domain tags keep the streams of different draws apart.
pub mod tag {
    pub const EVAL_SUBSAMPLE: &str = "eval-subsample";
    pub const SUPPORT: &str = "support";
    pub const PERMUTATION: &str = "permutation";
    pub const BASELINE: &str = "random-baseline";
}

/// Derive a 64-bit seed from a domain tag and a sequence of integers.
pub fn derive_seed(tag: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

pub fn rng_for(tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(tag, parts))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn json_digest<T: serde::Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory values serialize");
    sha256_hex(bytes)
}

/// Incremental hasher over length-prefixed string parts, so that
/// `["ab", "c"]` and `["a", "bc"]` never collide.
#[derive(Clone, Default)]
pub struct PartsHasher(Sha256);

impl PartsHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn part(mut self, s: &str) -> Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn parts<'a, I: IntoIterator<Item = &'a str>>(mut self, items: I) -> Self {
        let mut n = 0u64;
        for s in items {
            self = self.part(s);
            n += 1;
        }
        self.0.update(n.to_le_bytes());
        self
    }

    pub fn finish_hex(self) -> String {
        hex::encode(self.0.finalize())
    }

    pub fn finish_u64(self) -> u64 {
        let out = self.0.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
    }
}
