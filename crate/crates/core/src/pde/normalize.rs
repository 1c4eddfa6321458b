use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel affine normalization to zero mean and unit standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics over every state of every trajectory in `train`.
    pub fn fit(train: &[Trajectory]) -> Result<Self> {
        let first = train.first().ok_or_else(|| Error::contract("cannot fit normalizer on empty split"))?;
        let c = first.grid.channels;
        let plane = first.grid.height * first.grid.width;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for tr in train {
            for s in &tr.states {
                for (ch, vals) in s.data().chunks(plane).enumerate() {
                    sum[ch] += vals.iter().sum::<f64>();
                    sq[ch] += vals.iter().map(|v| v * v).sum::<f64>();
                }
                count += plane;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count as f64 - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Ok(Normalizer { mean, std })
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let plane: usize = x.shape()[x.ndim() - 2..].iter().product();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = f(*v, self.mean[ch], self.std[ch]));
        }
        out
    }

    /// Works on `[C,H,W]` or `[B,C,H,W]` tensors.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| v * s + m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_is_exact_to_1e12() {
        let norm = Normalizer {
            mean: vec![0.3, -2.0],
            std: vec![1.7, 0.02],
        };
        let x = Rng::new(1).normal_tensor(&[3, 2, 4, 4]);
        let back = norm.denormalize(&norm.normalize(&x));
        assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }
}
