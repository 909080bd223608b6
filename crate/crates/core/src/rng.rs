//! Named, seeded random streams.
//!
//! Every stochastic concern (path sampling, distillation, attacks, data
//! shuffling, ...) draws from its own stream derived from the experiment seed,
//! a label, and an epoch index. Re-deriving a stream reproduces it exactly,
//! which is what makes checkpoint resume and repeat-run equality work.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// The concrete RNG used everywhere; reproducible across platforms.
pub type Stream = ChaCha8Rng;

/// Derive a 32-byte ChaCha seed from (seed, label, epoch).
fn seed_bytes(seed: u64, label: &str, epoch: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(epoch.to_le_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// A named stream for one concern within one epoch.
pub fn stream(seed: u64, label: &str, epoch: u64) -> Stream {
    ChaCha8Rng::from_seed(seed_bytes(seed, label, epoch))
}

/// Derive a child seed, e.g. for per-worker or per-model streams.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let b = seed_bytes(seed, label, index);
    u64::from_le_bytes(b[..8].try_into().unwrap())
}

/// Stream labels used by the library; recorded in checkpoint manifests.
pub mod labels {
    pub const PATHS: &str = "paths";
    pub const DISTILL: &str = "distill";
    pub const ATTACK: &str = "attack";
    pub const SHUFFLE: &str = "shuffle";
    pub const INIT: &str = "init";
    pub const DATA: &str = "data";
}
