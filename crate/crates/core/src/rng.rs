//! Deterministic RNG streams keyed by (seed, stream, index), so results do not
//! depend on thread scheduling or on how work is chunked.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Distinct purposes never share a stream.
pub mod stream {
    pub const FOREGROUND: u64 = 1;
    pub const BACKGROUND: u64 = 2;
    pub const TRIMAP: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const DATASET: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, index))
}
