//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0
            && (0.0..1.0).contains(&self.warmup_frac);
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total`: linear warmup then cosine decay to 0.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64) * warmup_frac).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update at learning rate `lr`; returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<f64> {
        if !grads.is_finite() {
            return Err(Error::Numeric {
                op: "gradient".into(),
            });
        }
        let c = self.config;
        let norm = grads.norm();
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params.value_mut(id).data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg() -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 0.0,
            warmup_frac: 0.1,
        }
    }

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert!((cosine_lr(1.0, 0, total, 0.1) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 9, total, 0.1) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, total, 0.1) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 55, total, 0.1) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 99, total, 0.1) < 1e-3);
        for s in 10..99 {
            assert!(cosine_lr(1.0, s + 1, total, 0.1) <= cosine_lr(1.0, s, total, 0.1));
        }
    }

    /// The first Adam step moves each coordinate by lr against the gradient sign.
    #[test]
    fn first_step_is_sign_step() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::from_vec(vec![1.0, -2.0]));
        let mut opt = AdamW::new(cfg(), &p);
        let mut g = Grads::zeros_like(&p);
        g.add_slice(id, &[3.0, -0.5]);
        opt.update(&mut p, &g, 0.1).unwrap();
        let w = p.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::from_vec(vec![3.0, -4.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.01, ..cfg() }, &p);
        for s in 0..500 {
            let mut g = Grads::zeros_like(&p);
            let w = p.value(id).data().to_vec();
            g.add_slice(id, &[2.0 * w[0], 2.0 * w[1]]);
            opt.update(&mut p, &g, cosine_lr(0.1, s, 500, 0.1)).unwrap();
        }
        assert!(p.value(id).norm() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::from_vec(vec![1.0]));
        let mut opt = AdamW::new(cfg(), &p);
        let mut g = Grads::zeros_like(&p);
        g.add_slice(id, &[f64::NAN]);
        assert!(opt.update(&mut p, &g, 0.1).is_err());
        assert_eq!(p.value(id).data(), &[1.0]);
    }
}
