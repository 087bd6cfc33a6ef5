//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha20 (the 20-round ChaCha
//! stream cipher used as a counter-based generator). A generator is addressed
//! by a 64-bit `seed` and a 64-bit `stream` id: the seed fills the first eight
//! key bytes (little-endian, remaining key bytes zero) and the stream id
//! selects the ChaCha nonce. Distinct consumers use distinct stream ids, so
//! draws never depend on call order or on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream-id namespaces. The low 32 bits carry an index (row, trial, factor).
pub mod streams {
    pub const ROW_PERM: u64 = 0x01 << 32;
    pub const COL_PERM: u64 = 0x02 << 32;
    pub const U_FACTORS: u64 = 0x03 << 32;
    pub const V_FACTORS: u64 = 0x04 << 32;
    pub const ROUNDING_ROWS: u64 = 0x05 << 32;
    pub const TRIALS: u64 = 0x06 << 32;
    pub const HAAR: u64 = 0x07 << 32;
    pub const PERMUTATION: u64 = 0x08 << 32;
    pub const SYNTHETIC: u64 = 0x09 << 32;
    pub const WORST_CASE: u64 = 0x0a << 32;
}

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Mixes a parent seed with an index into a child seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
