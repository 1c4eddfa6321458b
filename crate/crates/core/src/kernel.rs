//! Location-scale bridge kernel between consecutive states.
//!
//! With `x0` the current state, `x1` the next one, flow time `t` and bridge
//! parameter `k`, the noisy state is `x_t = mu_t + sigma_t z` where
//! `mu_t = t x1 + k (1 - t) x0` and `sigma_t = (1 - t)(1 - k)`.
//! `k = 1` is deterministic interpolation, `k = 0` starts from pure noise.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSample {
    pub x_t: Tensor,
    pub t: f64,
    pub k: f64,
    pub z: Tensor,
    pub x0: Tensor,
    pub x1: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityTarget {
    pub u: Tensor,
    /// `(1 - t) u`, equal to `x1 - x_t`.
    pub preconditioned: Tensor,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::contract(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

pub fn bridge_std(t: f64, k: f64) -> f64 {
    (1.0 - t) * (1.0 - k)
}

pub fn bridge_mean(x0: &Tensor, x1: &Tensor, t: f64, k: f64) -> Result<Tensor> {
    x1.zip_map(x0, "bridge", |b, a| t * b + k * (1.0 - t) * a)
}

/// Bridge sample with a caller-provided noise draw.
pub fn bridge_with_noise(x0: &Tensor, x1: &Tensor, t: f64, k: f64, z: Tensor) -> Result<BridgeSample> {
    check_unit("t", t)?;
    check_unit("k", k)?;
    x0.expect_same_shape(x1, "bridge")?;
    x0.expect_same_shape(&z, "bridge noise")?;
    let sigma = bridge_std(t, k);
    let x_t = bridge_mean(x0, x1, t, k)?.zip_map(&z, "bridge", |m, e| m + sigma * e)?;
    Ok(BridgeSample {
        x_t,
        t,
        k,
        z,
        x0: x0.clone(),
        x1: x1.clone(),
    })
}

pub fn sample_bridge(x0: &Tensor, x1: &Tensor, t: f64, k: f64, rng: &mut Rng) -> Result<BridgeSample> {
    let z = rng.normal_tensor(x0.shape());
    bridge_with_noise(x0, x1, t, k, z)
}

impl BridgeSample {
    pub fn mean(&self) -> Tensor {
        bridge_mean(&self.x0, &self.x1, self.t, self.k).expect("shapes checked at construction")
    }

    pub fn std(&self) -> f64 {
        bridge_std(self.t, self.k)
    }

    /// Residual form `x0 + t (x1 - x0) - (1 - t)(1 - k)(x0 - z)`.
    pub fn residual_form(&self) -> Tensor {
        let (t, k) = (self.t, self.k);
        let d = self.x0.data();
        let data = (0..d.len())
            .map(|i| {
                let (a, b, z) = (d[i], self.x1.data()[i], self.z.data()[i]);
                a + t * (b - a) - (1.0 - t) * (1.0 - k) * (a - z)
            })
            .collect();
        Tensor::new(self.x0.shape().to_vec(), data).expect("same shape")
    }

    /// `(1 - k)(x0 - z) + (x1 - x0)`, defined for every `t`.
    pub fn velocity_closed_form(&self) -> Tensor {
        let k = self.k;
        let d = self.x0.data();
        let data = (0..d.len())
            .map(|i| (1.0 - k) * (d[i] - self.z.data()[i]) + self.x1.data()[i] - d[i])
            .collect();
        Tensor::new(self.x0.shape().to_vec(), data).expect("same shape")
    }

    /// `x1 - x_t`.
    pub fn preconditioned_target(&self) -> Tensor {
        self.x1.sub(&self.x_t).expect("same shape")
    }
}

/// Sample-wise velocity in quotient form `(x1 - x_t) / (1 - t)`.
pub fn velocity_target(s: &BridgeSample) -> Result<VelocityTarget> {
    if s.t >= 1.0 {
        return Err(Error::Singularity);
    }
    let preconditioned = s.preconditioned_target();
    let u = preconditioned.scale(1.0 / (1.0 - s.t));
    Ok(VelocityTarget { u, preconditioned })
}

/// Score of the Gaussian kernel at the sampled point, `-z / sigma_t`.
pub fn conditional_score(s: &BridgeSample) -> Result<Tensor> {
    let sigma = s.std();
    if sigma <= 0.0 {
        return Err(Error::DegenerateKernel { t: s.t, k: s.k });
    }
    Ok(s.z.scale(-1.0 / sigma))
}

/// `(x1 - k x0) + (1 - t)(1 - k)^2 score`, which equals the sample-wise velocity.
pub fn score_velocity_decomposition(s: &BridgeSample) -> Result<Tensor> {
    let score = conditional_score(s)?;
    let c = (1.0 - s.t) * (1.0 - s.k).powi(2);
    let k = s.k;
    let lead = s.x1.zip_map(&s.x0, "decomposition", |b, a| b - k * a)?;
    lead.zip_map(&score, "decomposition", |l, sc| l + c * sc)
}

/// Preconditioned objective `0.5 mean((1 - t) pred - (x1 - x_t))^2` over cells.
pub fn fm_loss(pred: &Tensor, s: &BridgeSample) -> Result<f64> {
    pred.expect_same_shape(&s.x_t, "fm_loss")?;
    let w = 1.0 - s.t;
    let n = pred.numel() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(s.x1.data())
        .zip(s.x_t.data())
        .map(|((p, b), x)| (w * p - (b - x)).powi(2))
        .sum();
    Ok(0.5 * sum / n)
}
