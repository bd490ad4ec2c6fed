//! Seeded random source.
//!
//! Every randomized operation takes an explicit [`Rng`]. The stream is
//! ChaCha8 (via `rand_chacha`) keyed by a 64-bit seed, so a seed fully
//! determines every draw on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub const ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream derived from this stream's seed and a label.
    /// Does not advance `self`.
    pub fn fork(&self, label: u64) -> Rng {
        // splitmix64 finalizer over (seed, label)
        let mut z = self
            .seed
            .wrapping_add(label.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Rng::new(z ^ (z >> 31))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal draw with standard deviation `std`, resampled until it falls in `[-2 std, 2 std]`.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Fisher–Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut map: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            map.swap(i, j);
        }
        map
    }

    pub fn normal_tensor<T: Element>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        Tensor::from_fn(shape.to_vec(), |_| T::of(self.normal() * std))
    }

    pub fn uniform_tensor<T: Element>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        Tensor::from_fn(shape.to_vec(), |_| T::of(lo + (hi - lo) * self.uniform()))
    }
}
