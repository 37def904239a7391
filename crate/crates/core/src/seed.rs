//! Counter-based seed derivation.
//!
//! One experiment seed fans out into independent streams keyed by purpose and
//! a tuple of indices (task, round, client, ...). Each derived seed depends only
//! on its own key, so adding a client or a task never shifts another stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data = 1,
    Pretext = 2,
    Backbone = 3,
    Adapter = 4,
    Head = 5,
    Partition = 6,
    Sgd = 7,
    Test = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the root seed, the stream tag and every index into one 64-bit seed.
pub fn derive_seed(root: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ 0x6a09_e667_f3bc_c908);
    h = splitmix64(h ^ (stream as u64));
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn rng_for(root: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, indices))
}
