//! Named random streams derived from a single run seed.
//!
//! Every stochastic component draws from its own stream, so switching one
//! component off never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed(pub u64);

impl Seed {
    /// Deterministic child rng for `name`.
    pub fn stream(self, name: &str) -> StreamRng {
        ChaCha8Rng::from_seed(derive(self.0, name))
    }

    /// Child rng for the `index`-th item of a named family (per-shard, per-image, ...).
    pub fn indexed(self, name: &str, index: u64) -> StreamRng {
        ChaCha8Rng::from_seed(derive(self.0, &format!("{name}#{index}")))
    }

    pub fn child(self, name: &str) -> Seed {
        let bytes = derive(self.0, name);
        Seed(u64::from_le_bytes(bytes[..8].try_into().unwrap()))
    }
}

fn derive(seed: u64, name: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.finalize().into()
}
