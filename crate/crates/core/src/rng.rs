//! Named random substreams derived from one run seed.
//!
//! Each consumer (data shuffling, initialisation, sampling, ...) draws from its
//! own stream so changing how much one of them consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const SHUFFLE: &str = "shuffle";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";
pub const SCHEDULED_SAMPLING: &str = "scheduled-sampling";
pub const SYNTH: &str = "synth";

/// Stream `name` of `seed`, further split by `index` (an epoch, say).
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
