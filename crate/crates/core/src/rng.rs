//! Named deterministic random streams.
//!
//! Every source of randomness in a run is a stream addressed by the master
//! seed plus a path of labels, e.g. `["noise", "site=2", "round=14",
//! "proj.weight"]`. Streams are derived by hashing, never by sharing mutable
//! generator state, so the draw sequence of one consumer can never depend on
//! how work was scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent generator for `(seed, path)`.
///
/// Each path component is length-prefixed before hashing so that
/// `["ab", "c"]` and `["a", "bc"]` name different streams.
pub fn derive_rng(seed: u64, path: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in path {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
