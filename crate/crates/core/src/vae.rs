//! Convolutional variational autoencoder between physical grids and latent grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArch {
    pub channels: usize,
    pub latent_channels: usize,
    pub width: usize,
    /// Spatial compression H/h, 4 or 8.
    pub factor: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        VaeArch {
            channels: 1,
            latent_channels: 4,
            width: 16,
            factor: 4,
        }
    }
}

impl VaeArch {
    pub fn validate(&self) -> Result<()> {
        if ![4, 8].contains(&self.factor) {
            return Err(Error::config(format!("vae factor must be 4 or 8, got {}", self.factor)));
        }
        if self.channels == 0 || self.latent_channels == 0 || self.width == 0 {
            return Err(Error::config("vae sizes must be positive"));
        }
        Ok(())
    }

    /// Pooling stages after the initial 2x space-to-depth.
    fn stages(&self) -> usize {
        self.factor.trailing_zeros() as usize - 1
    }
}

type Conv = (ParamId, ParamId);

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    enc_in: Conv,
    enc_stages: Vec<Conv>,
    enc_mid: Conv,
    mean: Conv,
    logvar: Conv,
    dec_in: Conv,
    dec_mid: Conv,
    dec_stages: Vec<Conv>,
    dec_out: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub arch: VaeArch,
    pub params: ParamStore,
    ids: Ids,
}

/// Posterior over a latent grid with the reparameterization draw that produced `sample`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub eps: Tensor,
    pub sample: Tensor,
}

/// Graph nodes of the two loss parts and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct VaeLossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub mean: Var,
}

/// `sum 0.5 (mu^2 + exp(lv) - 1 - lv)` over every cell.
pub fn kl_standard_normal(mean: &Tensor, logvar: &Tensor) -> Result<f64> {
    mean.expect_same_shape(logvar, "kl")?;
    Ok(mean
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum())
}

impl Vae {
    pub fn new(arch: VaeArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut p = ParamStore::with_namespace(crate::params::VAE_NAMESPACE);
        let (c, l, w) = (arch.channels, arch.latent_channels, arch.width);
        let mut conv = |name: &str, cin: usize, cout: usize| {
            (
                p.add_uniform(&format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, rng),
                p.add_zeros(&format!("{name}.b"), &[cout]),
            )
        };
        let enc_in = conv("enc.in", 4 * c, w);
        let enc_stages = (0..arch.stages()).map(|i| conv(&format!("enc.stage{i}"), w, w)).collect();
        let enc_mid = conv("enc.mid", w, w);
        let mean = conv("enc.mean", w, l);
        let logvar = conv("enc.logvar", w, l);
        let dec_in = conv("dec.in", l, w);
        let dec_mid = conv("dec.mid", w, w);
        let dec_stages = (0..arch.stages()).map(|i| conv(&format!("dec.stage{i}"), w, w)).collect();
        let dec_out = conv("dec.out", w, 4 * c);
        Ok(Vae {
            arch,
            params: p,
            ids: Ids {
                enc_in,
                enc_stages,
                enc_mid,
                mean,
                logvar,
                dec_in,
                dec_mid,
                dec_stages,
                dec_out,
            },
        })
    }

    fn conv(&self, g: &mut Graph, x: Var, (w, b): Conv) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let xp = g.pad_periodic(x, 1)?;
        let y = g.conv2d(xp, wv, 0)?;
        let bv = g.param(&self.params, b);
        g.add_bias(y, bv)
    }

    fn conv_gelu(&self, g: &mut Graph, x: Var, c: Conv) -> Result<Var> {
        let y = self.conv(g, x, c)?;
        g.gelu(y)
    }

    /// Mean and clamped log-variance heads for `x: [B, C, H, W]`.
    ///
    /// The first halving is a lossless space-to-depth, so no convolution runs
    /// at full resolution; the decoder mirrors it with depth-to-space.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let folded = g.space_to_depth(x, 2)?;
        let mut a = self.conv_gelu(g, folded, self.ids.enc_in)?;
        for &s in &self.ids.enc_stages {
            a = self.conv_gelu(g, a, s)?;
            a = g.avg_pool(a, 2)?;
        }
        a = self.conv_gelu(g, a, self.ids.enc_mid)?;
        let mean = self.conv(g, a, self.ids.mean)?;
        let lv = self.conv(g, a, self.ids.logvar)?;
        let lv = g.clamp(lv, LOGVAR_RANGE.0, LOGVAR_RANGE.1)?;
        Ok((mean, lv))
    }

    pub fn decode_graph(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let mut a = self.conv_gelu(g, y, self.ids.dec_in)?;
        a = self.conv_gelu(g, a, self.ids.dec_mid)?;
        for &s in &self.ids.dec_stages {
            a = g.upsample(a, 2)?;
            a = self.conv_gelu(g, a, s)?;
        }
        let folded = self.conv(g, a, self.ids.dec_out)?;
        g.depth_to_space(folded, 2)
    }

    fn as_batch(&self, x: &Tensor, channels: usize, side_multiple: usize, what: &str) -> Result<(Tensor, bool)> {
        let s = x.shape();
        let (batched, dims) = match s.len() {
            3 => (false, [1, s[0], s[1], s[2]]),
            4 => (true, [s[0], s[1], s[2], s[3]]),
            _ => return Err(Error::contract(format!("{what} must be [C,H,W] or [B,C,H,W], got {s:?}"))),
        };
        if dims[1] != channels || dims[2] % side_multiple != 0 || dims[3] % side_multiple != 0 {
            return Err(Error::contract(format!("{what} shape {s:?} does not match the autoencoder")));
        }
        Ok((x.clone().reshape(&dims)?, batched))
    }

    fn unbatch(t: Tensor, batched: bool) -> Result<Tensor> {
        if batched {
            return Ok(t);
        }
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    }

    /// Posterior mean only; `x` is `[C,H,W]` or `[B,C,H,W]`.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        let (xb, batched) = self.as_batch(x, self.arch.channels, self.arch.factor, "encoder input")?;
        let mut g = Graph::new();
        let xv = g.input(xb);
        let (mean, _) = self.encode_graph(&mut g, xv)?;
        Self::unbatch(g.value(mean).clone(), batched)
    }

    pub fn encode(&self, x: &Tensor, rng: &mut Rng) -> Result<LatentGrid> {
        let (xb, batched) = self.as_batch(x, self.arch.channels, self.arch.factor, "encoder input")?;
        let mut g = Graph::new();
        let xv = g.input(xb);
        let (mean, lv) = self.encode_graph(&mut g, xv)?;
        let (mean, logvar) = (g.value(mean).clone(), g.value(lv).clone());
        let eps = rng.normal_tensor(mean.shape());
        let std = logvar.map(|l| (0.5 * l).exp());
        let sample = mean.add(&std.zip_map(&eps, "reparameterize", |s, e| s * e)?)?;
        Ok(LatentGrid {
            mean: Self::unbatch(mean, batched)?,
            logvar: Self::unbatch(logvar, batched)?,
            eps: Self::unbatch(eps, batched)?,
            sample: Self::unbatch(sample, batched)?,
        })
    }

    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        let (yb, batched) = self.as_batch(y, self.arch.latent_channels, 1, "latent grid")?;
        let mut g = Graph::new();
        let yv = g.input(yb);
        let out = self.decode_graph(&mut g, yv)?;
        Self::unbatch(g.value(out).clone(), batched)
    }

    /// Loss on a batch `x: [B, C, H, W]` with a fixed reparameterization draw `eps`.
    ///
    /// Reconstruction is `0.5 ||x - x_hat||^2` summed over cells and the KL is
    /// summed over latent cells, both averaged over the batch.
    pub fn loss_graph(&self, g: &mut Graph, x: &Tensor, eps: &Tensor, beta: f64) -> Result<VaeLossVars> {
        if beta < 0.0 {
            return Err(Error::contract(format!("beta must be >= 0, got {beta}")));
        }
        let (xb, _) = self.as_batch(x, self.arch.channels, self.arch.factor, "encoder input")?;
        let batch = xb.shape()[0] as f64;
        let xv = g.input(xb);
        let (mean, lv) = self.encode_graph(g, xv)?;
        if eps.shape() != g.value(mean).shape() {
            return Err(Error::contract("reparameterization draw has the wrong shape"));
        }
        let half = g.scale(lv, 0.5)?;
        let std = g.exp(half)?;
        let e = g.input(eps.clone());
        let noise = g.mul(std, e)?;
        let y = g.add(mean, noise)?;
        let xhat = self.decode_graph(g, y)?;
        let diff = g.sub(xhat, xv)?;
        let sq = g.square(diff)?;
        let se = g.sum(sq)?;
        let recon = g.scale(se, 0.5 / batch)?;
        let m2 = g.square(mean)?;
        let var = g.exp(lv)?;
        let a = g.add(m2, var)?;
        let b = g.sub(a, lv)?;
        let b = g.add_scalar(b, -1.0)?;
        let ks = g.sum(b)?;
        let kl = g.scale(ks, 0.5 / batch)?;
        let weighted = g.scale(kl, beta)?;
        let total = g.add(recon, weighted)?;
        Ok(VaeLossVars {
            total,
            recon,
            kl,
            mean,
        })
    }

    /// Loss value with a fresh reparameterization draw.
    pub fn loss(&self, x: &Tensor, rng: &mut Rng, beta: f64) -> Result<f64> {
        let (xb, _) = self.as_batch(x, self.arch.channels, self.arch.factor, "encoder input")?;
        let f = self.arch.factor;
        let s = xb.shape();
        let eps = rng.normal_tensor(&[s[0], self.arch.latent_channels, s[2] / f, s[3] / f]);
        let mut g = Graph::new();
        let vars = self.loss_graph(&mut g, &xb, &eps, beta)?;
        Ok(g.value(vars.total).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vae() -> Vae {
        Vae::new(
            VaeArch {
                channels: 1,
                latent_channels: 2,
                width: 4,
                factor: 4,
            },
            &mut Rng::new(1),
        )
        .unwrap()
    }

    #[test]
    fn shapes_round_trip() {
        let v = vae();
        let x = Rng::new(2).normal_tensor(&[1, 32, 32]);
        let lat = v.encode(&x, &mut Rng::new(3)).unwrap();
        assert_eq!(lat.mean.shape(), &[2, 8, 8]);
        assert_eq!(v.decode(&lat.mean).unwrap().shape(), &[1, 32, 32]);
        assert_eq!(v.encode_mean(&x).unwrap(), lat.mean);
        assert!(v.encode(&Tensor::zeros(&[2, 32, 32]), &mut Rng::new(3)).is_err());
        assert!(v.decode(&Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn extreme_latents_decode_finite() {
        let v = vae();
        for val in [-10.0, 10.0] {
            assert!(v.decode(&Tensor::full(&[2, 8, 8], val)).unwrap().is_finite());
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_standard_normal(&Tensor::zeros(&[3]), &Tensor::zeros(&[3])).unwrap(), 0.0);
        assert!((kl_standard_normal(&Tensor::full(&[1], 1.0), &Tensor::zeros(&[1])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_is_reconstruction_only() {
        let v = vae();
        let x = Rng::new(4).normal_tensor(&[2, 1, 16, 16]);
        let eps = Rng::new(5).normal_tensor(&[2, 2, 4, 4]);
        let mut g = Graph::new();
        let l = v.loss_graph(&mut g, &x, &eps, 0.0).unwrap();
        assert_eq!(g.value(l.total).item(), g.value(l.recon).item());
        assert!(v.loss_graph(&mut Graph::new(), &x, &eps, -1.0).is_err());
    }
}
