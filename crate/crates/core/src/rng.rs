//! Named random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream names used across the crate.
pub mod streams {
    pub const EMBEDDING_INIT: &str = "vocab-init";
    pub const PARAM_INIT: &str = "param-init";
    pub const DROPOUT: &str = "dropout";
    pub const SHUFFLE: &str = "shuffle";
    pub const MONTE_CARLO: &str = "monte-carlo";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Platform-independent seed for `(master, stream)`.
pub fn sub_seed(master: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

pub fn stream(master: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(sub_seed(master, name))
}

/// Stream for the `index`-th independent unit of work (e.g. one Monte Carlo run).
pub fn indexed_stream(master: u64, name: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(splitmix64(sub_seed(master, name) ^ splitmix64(index)))
}
