//! Seeded random streams. Every consumer draws from its own `(seed, stream)`
//! pair, so adding a new consumer never shifts the numbers another one sees.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rand_pcg::Pcg32;

use crate::tensor::{Scalar, Tensor};

/// Well-known stream identifiers. Sub-streams are derived with [`RngStream::fork`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const DATA: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// PCG32 generator whose state and increment are derived from `(seed, stream)`
/// through splitmix64.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: Pcg32,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let state = splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5151)));
        let inc = splitmix64(stream.rotate_left(17) ^ seed.wrapping_mul(3));
        Self {
            seed,
            stream,
            inner: Pcg32::new(state, inc),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream, e.g. one per story or per sampled image.
    pub fn fork(&self, child: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream ^ splitmix64(child)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::lit(self.normal()))
    }

    pub fn normal_tensor_scaled<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::lit(self.normal() * std))
    }

    pub fn uniform_tensor<S: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::lit(lo + (hi - lo) * self.uniform()))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
