//! Deterministic random streams.
//!
//! Every stochastic component draws from a stream keyed by `(seed, stream, index)`
//! so that work for step `t` never depends on how much randomness step `t - 1`
//! consumed. Resuming from a checkpoint only needs the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_AUGMENT: u64 = 3;
pub const STREAM_CLUSTER: u64 = 4;
pub const STREAM_SAMPLE: u64 = 5;
pub const STREAM_PROBE: u64 = 6;
pub const STREAM_WARMUP: u64 = 7;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed);
    state = splitmix64(state ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    state = splitmix64(state ^ index.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
