//! Seeded randomness.
//!
//! Every random draw in the crate flows from an explicit `u64` seed into a
//! xoshiro256** generator whose 256-bit state is expanded from the seed with
//! splitmix64 (the `seed_from_u64` construction of `rand_xoshiro`). Uniform
//! draws are mapped with fixed formulas so other languages can replay them:
//!
//! * `unit(rng)   = (next_u64 >> 11) * 2^-53`, a double in `[0, 1)`
//! * `below(rng, n) = (next_u64 * n) >> 64` computed in 128-bit arithmetic

use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use crate::scalar::Scalar;

pub type Rng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// splitmix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for `(stream, index)` under a root seed.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(stream)) ^ index)
}

pub fn unit(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn below(rng: &mut Rng, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Integer uniformly drawn from the inclusive range `[lo, hi]`.
pub fn between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + below(rng, hi - lo + 1)
}

pub fn normal<T: Scalar>(rng: &mut Rng, std: f64) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::of(z * std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let (mut a, mut b) = (seeded(7), seeded(7));
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = seeded(1);
        for n in 1..50 {
            assert!(below(&mut r, n) < n);
        }
        assert!(unit(&mut r) < 1.0);
    }

    #[test]
    fn derive_separates_streams() {
        assert_ne!(derive(3, 0, 1), derive(3, 1, 0));
        assert_eq!(derive(3, 2, 5), derive(3, 2, 5));
    }
}
