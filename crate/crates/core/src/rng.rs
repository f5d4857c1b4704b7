//! Named random substreams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Returns an independent generator for `(seed, label)`.
///
/// Streams with different labels are uncorrelated, and adding a new
/// consumer never shifts the values another consumer sees.
pub fn substream(seed: u64, label: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Derives a child seed, for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    substream(seed, label).next_u64()
}
