//! Named random substreams.
//!
//! Every stochastic stage draws from a ChaCha stream whose key is derived
//! from `(root seed, stream name, index)`. Two stages never share a stream,
//! and a stage's draws do not depend on how many draws other stages made.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha12Rng;

/// Well-known stream names.
pub mod streams {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const DP_BATCH: &str = "dp-batch";
    pub const DP_NOISE: &str = "dp-noise";
    pub const GMM: &str = "gmm";
    pub const ADAPT: &str = "adapt";
    pub const ATTACK: &str = "attack";
}

/// Returns the generator for `(seed, name, index)`.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    StreamRng::from_seed(key)
}

/// Derives a child seed, used when a whole stage needs its own root seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(seed, name, u64::MAX).next_u64()
}
