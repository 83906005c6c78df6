//! Portable random streams.
//!
//! Every random draw in the crate comes from `Pcg64` (PCG XSL RR 128/64,
//! O'Neill 2014):
//!
//! ```text
//! state  <- state * 0x2360ed051fc65da44385df649fccf645
//!                 + increment                        (mod 2^128)
//! output  = rotr64(hi64(state) ^ lo64(state), state >> 122)
//! ```
//!
//! A stream is keyed by `(seed, stream_id)`:
//!
//! ```text
//! s0        = (splitmix64(seed) << 64)
//!           | splitmix64(seed ^ (stream_id * 0xd1b54a32d192ed03 mod 2^64))
//! increment = (stream_id << 1) | 1
//! state     = (s0 + increment) * MULT + increment      (one warm-up step)
//! ```
//!
//! and each 64-bit draw advances the LCG once before applying the output
//! permutation, so distinct purposes (source data, target data, batching,
//! augmentation) never share a sequence. Uniform floats take the top 53
//! bits of one draw.

use rand_pcg::Pcg64;

/// Well-known stream ids. Values are part of the on-disk determinism contract.
pub mod streams {
    pub const SOURCE_DATA: u64 = 1;
    pub const TARGET_DATA: u64 = 2;
    pub const HELDOUT_DATA: u64 = 3;
    pub const MODEL_INIT: u64 = 10;
    pub const PROJECTOR_INIT: u64 = 11;
    pub const BATCHING: u64 = 20;
    pub const INTERMEDIATE_DRAW: u64 = 21;
    pub const MIXUP: u64 = 22;
    pub const AUGMENT: u64 = 23;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub type StreamRng = Pcg64;

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let hi = splitmix64(seed) as u128;
    let lo = splitmix64(seed ^ stream_id.wrapping_mul(0xd1b5_4a32_d192_ed03)) as u128;
    let state = (hi << 64) | lo;
    Pcg64::new(state, stream_id as u128)
}
