//! Seed derivation and random streams.
//!
//! Every random draw in the pipeline comes from a [`Stream`], a
//! xoshiro256++ generator whose 256-bit state is filled by SplitMix64 from a
//! derived 64-bit seed. Seeds are derived from a global seed, a purpose tag
//! and an index:
//!
//! ```text
//! a = splitmix64(global)
//! b = splitmix64(a ^ fnv1a64(tag))
//! seed = splitmix64(b ^ index)
//! ```
//!
//! where `splitmix64(x)` is the first output of a SplitMix64 generator with
//! state `x`. Uniform reals use the top 53 bits: `(next_u64 >> 11) * 2^-53`.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

pub type Stream = Xoshiro256PlusPlus;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    SplitMix64::seed_from_u64(x).next_u64()
}

pub fn derive_seed(global: u64, tag: &str, index: u64) -> u64 {
    let a = splitmix64(global);
    let b = splitmix64(a ^ fnv1a64(tag.as_bytes()));
    splitmix64(b ^ index)
}

pub fn stream(global: u64, tag: &str, index: u64) -> Stream {
    Stream::seed_from_u64(derive_seed(global, tag, index))
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
pub fn uniform01(rng: &mut Stream) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
