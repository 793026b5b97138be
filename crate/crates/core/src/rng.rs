//! Seeded random streams.
//!
//! All randomness derives from one root seed. A named stream is a
//! xoshiro256++ generator seeded through SplitMix64 with
//! `root_seed ^ fnv1a64(tag)`, so independent consumers (data generation,
//! initialization, batch sampling, blend coefficients) never share state and
//! adding a consumer never shifts another's sequence. Gaussian draws use
//! Box–Muller with the portable `libm` routines.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

fn fnv1a64(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent generator for the stream named `tag` under `root_seed`.
pub fn stream(root_seed: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(root_seed ^ fnv1a64(tag))
}

/// Uniform draw in `[0, 1)` with 53 random bits.
pub fn uniform(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform index in `0..n`. Panics if `n == 0`.
pub fn index(rng: &mut Rng, n: usize) -> usize {
    assert!(n > 0, "cannot draw an index from an empty range");
    let n = n as u64;
    // reject the top partial block so every residue is equally likely
    let limit = u64::MAX - u64::MAX % n;
    loop {
        let v = rng.next_u64();
        if v < limit {
            return (v % n) as usize;
        }
    }
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    // 1 - u keeps the log argument in (0, 1].
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}
