//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha20 stream keyed by
//! `(seed, domain)` and selected by a 64-bit stream index. Parallel loops give
//! each item its own index, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Generator identifier recorded in provenance sidecars and manifests.
pub const RNG_VERSION: &str = "chacha20-sha256key-v1";

pub type StreamRng = ChaCha20Rng;

pub fn stream(seed: u64, domain: &str, index: u64) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derives a child seed, used to hand independent seeds to pipeline stages.
pub fn derive_seed(seed: u64, domain: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/derive/");
    hasher.update(domain.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Uniform draw on `(0, 1]`.
pub(crate) fn open_unit<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}
