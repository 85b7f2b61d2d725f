//! Named sub-seeds derived from a single root seed.
//!
//! Each consumer of randomness asks for its own stream by name
//! (`"decompose.noise"`, `"relieff.sample"`, `"model.init"`,
//! `"train.shuffle"`, ...), optionally with an index for per-item streams.
//! Derivation hashes the root seed with the name, so adding a consumer never
//! shifts the stream of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DECOMPOSE_NOISE: &str = "decompose.noise";
pub const RELIEFF_SAMPLE: &str = "relieff.sample";
pub const MODEL_INIT: &str = "model.init";
pub const TRAIN_SHUFFLE: &str = "train.shuffle";

pub fn sub_seed(root: u64, name: &str) -> u64 {
    indexed_sub_seed(root, name, 0)
}

pub fn indexed_sub_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
