//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, stream_id)` and advances a 128-bit block
//! counter, so any position can be saved and restored exactly. ChaCha8 is the
//! block function; sample streams are identical on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `stream_id` of the run seeded with `seed`.
    pub fn stream(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Rng {
            seed,
            stream: stream_id,
            inner,
        }
    }

    /// Derive a child stream; children of distinct ids never overlap.
    pub fn fork(&self, id: u64) -> Self {
        Self::stream(self.seed, self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id + 1))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut r = Self::stream(state.seed, state.stream);
        r.inner.set_word_pos(state.word_pos);
        r
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::stream(7, 0);
        let mut b = Rng::stream(7, 1);
        assert_ne!(a.uniform(), b.uniform());
    }

    #[test]
    fn state_roundtrip_resumes_exactly() {
        let mut a = Rng::new(3);
        for _ in 0..17 {
            a.normal();
        }
        let mut b = Rng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn normal_moments_within_bounds() {
        let n = 100_000;
        let mut r = Rng::new(11);
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let root = (n as f64).sqrt();
        assert!(mean.abs() < 4.0 / root, "mean {mean}");
        assert!((var - 1.0).abs() < 8.0 / root, "var {var}");
    }
}
