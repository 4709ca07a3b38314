//! Seedable random source used for every initialization and sampling step.
//!
//! Algorithm, fixed so that runs are bit-reproducible:
//!
//! * state: xoshiro256** seeded from a `u64` through SplitMix64
//!   (`Xoshiro256StarStar::seed_from_u64`);
//! * uniform `f64` in `[0, 1)`: top 53 bits of `next_u64` times 2^-53;
//! * standard normal: Box–Muller, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`,
//!   one fresh pair of uniforms per draw (the sine branch is discarded);
//! * bounded integer in `[0, n)`: `(next_u64 as u128 * n) >> 64`;
//! * shuffle: Fisher–Yates from the last index down.
//!
//! Independent streams are derived with [`Rng::derive`], which mixes a label
//! through 64-bit FNV-1a into the parent seed. Parameters are initialized from
//! streams keyed by their name, so two models that share a parameter name and
//! shape start from identical values.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::encoder::fnv1a64;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `label`; does not advance `self`.
    pub fn derive(&self, label: &str) -> Rng {
        let mut key = self.seed.to_le_bytes().to_vec();
        key.push(0x1f);
        key.extend_from_slice(label.as_bytes());
        Rng::new(fnv1a64(&key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
