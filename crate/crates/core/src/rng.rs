//! Seeded random streams.
//!
//! The generator is SplitMix64 (Steele, Lea and Flood), seeded directly with
//! the 64-bit seed. Normal variates use the cosine branch of Box–Muller and
//! consume exactly two outputs each, so the stream layout is easy to reproduce
//! in another language:
//!
//! ```text
//! u1 = ((next >> 11) + 1) * 2^-53        in (0, 1]
//! u2 = (next >> 11) * 2^-53              in [0, 1)
//! z  = sqrt(-2 ln u1) * cos(2 pi u2)
//! ```

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `0..bound` (multiply-shift, bias below 2^-64 * bound).
    pub fn below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

/// SplitMix64 output function applied to a single word.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-stream `(a, b)` of a base seed: `mix64(mix64(base ^ a) ^ b)`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(base ^ a) ^ b)
}
