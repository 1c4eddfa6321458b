//! Conditional velocity network, recurrent filter and the latent temporal pyramid.

mod cfm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub use cfm::{cfm_loss, pyramid_down, term_inputs, CfmTerms, Sampler01, TermDraws, WindowDraws};

/// Architecture of the velocity network and filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmtArch {
    pub latent_channels: usize,
    pub width: usize,
    pub blocks: usize,
    /// Filter state size D.
    pub hidden: usize,
    /// Sinusoidal time embedding size.
    pub time_dim: usize,
}

impl Default for FmtArch {
    fn default() -> Self {
        FmtArch {
            latent_channels: 4,
            width: 32,
            blocks: 2,
            hidden: 32,
            time_dim: 16,
        }
    }
}

impl FmtArch {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::config("fmt sizes must be positive"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::config(format!("time_dim must be even and >= 2, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// Downsample factors for the four window states, oldest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub factors: [usize; 4],
}

impl PyramidSpec {
    /// Factors for a latent side: 16 and above -> (8,4,2,1), 8 -> (4,2,1,1), 4 -> (2,1,1,1).
    pub fn auto(side: usize) -> Self {
        let factors = match side {
            s if s >= 16 && s % 8 == 0 => [8, 4, 2, 1],
            s if s >= 8 && s % 4 == 0 => [4, 2, 1, 1],
            s if s >= 4 && s % 2 == 0 => [2, 1, 1, 1],
            _ => [1, 1, 1, 1],
        };
        PyramidSpec { factors }
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        let f = self.factors;
        if f[3] != 1 {
            return Err(Error::config(format!("last pyramid factor must be 1, got {f:?}")));
        }
        for i in 0..4 {
            if f[i] == 0 || side % f[i] != 0 {
                return Err(Error::config(format!("pyramid factor {} does not divide latent side {side}", f[i])));
            }
            if i < 3 && (f[i] < f[i + 1] || f[i] % f[i + 1] != 0) {
                return Err(Error::config(format!("pyramid factors must be non-increasing and nested, got {f:?}")));
            }
        }
        Ok(())
    }
}

/// Token-count ratio between full attention over 4 frames and the pyramid.
pub fn efficiency_ratio(token_side: usize, factors: &[usize]) -> f64 {
    let side2 = (token_side * token_side) as f64;
    let full = factors.len() as f64 * side2;
    let reduced: f64 = factors
        .iter()
        .map(|&f| {
            let n = (token_side / f) as f64;
            (n * n).powi(2)
        })
        .sum();
    full * full / reduced
}

/// Angular frequencies of the time embedding, geometric from 1 to 100.
pub fn time_frequencies(dim: usize) -> Vec<f64> {
    let n = dim / 2;
    (0..n)
        .map(|i| {
            if n == 1 {
                1.0
            } else {
                100f64.powf(i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// `[sin(w_i t) ..., cos(w_i t) ...]`.
pub fn embed_time(t: f64, dim: usize) -> Vec<f64> {
    let w = time_frequencies(dim);
    w.iter().map(|w| (w * t).sin()).chain(w.iter().map(|w| (w * t).cos())).collect()
}

fn embed_batch(ts: &[f64], dim: usize) -> Tensor {
    let data = ts.iter().flat_map(|&t| embed_time(t, dim)).collect();
    Tensor::new(vec![ts.len(), dim], data).expect("embedding shape")
}

/// Recurrent summary of the noisy history for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub h: Tensor,
    pub step_index: usize,
}

/// The pieces of a model the window objective needs.
pub trait Forcing {
    fn store(&self) -> &ParamStore;
    /// Learned initial state repeated over the batch, `[B, D]`.
    fn initial_filter(&self, g: &mut Graph, batch: usize) -> Result<Var>;
    fn filter(&self, g: &mut Graph, h: Var, x_noisy: Var, t: &[f64]) -> Result<Var>;
    fn velocity(&self, g: &mut Graph, x: Var, t: &[f64], h: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv1: (ParamId, ParamId),
    cond: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    time: (ParamId, ParamId),
    film_scale: (ParamId, ParamId),
    film_shift: (ParamId, ParamId),
    input: (ParamId, ParamId),
    blocks: Vec<Block>,
    output: (ParamId, ParamId),
    h0: ParamId,
    pool: (ParamId, ParamId),
    gru_x: [ParamId; 3],
    gru_h: [ParamId; 3],
    gru_b: [ParamId; 3],
}

/// Velocity network g(x_t, t, h) together with the filter producing h.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub arch: FmtArch,
    pub params: ParamStore,
    ids: Ids,
}

impl FlowModel {
    pub fn new(arch: FmtArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut p = ParamStore::with_namespace(crate::params::FLOW_NAMESPACE);
        let (c, w, d, e) = (arch.latent_channels, arch.width, arch.hidden, arch.time_dim);
        let conv = |p: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng| {
            (
                p.add_uniform(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng),
                p.add_zeros(&format!("{name}.b"), &[cout]),
            )
        };
        let dense_zero = |p: &mut ParamStore, name: &str, i: usize, o: usize| {
            (p.add_zeros(&format!("{name}.w"), &[i, o]), p.add_zeros(&format!("{name}.b"), &[o]))
        };
        let time = (p.add_uniform("vel.time.w", &[e, w], e, rng), p.add_zeros("vel.time.b", &[w]));
        let film_scale = dense_zero(&mut p, "vel.film_scale", w, w);
        let film_shift = dense_zero(&mut p, "vel.film_shift", w, w);
        let input = conv(&mut p, "vel.in", c, w, 3, rng);
        let blocks = (0..arch.blocks)
            .map(|b| Block {
                conv1: conv(&mut p, &format!("vel.block{b}.conv1"), w, w, 3, rng),
                cond: dense_zero(&mut p, &format!("vel.block{b}.cond"), w + d, w),
                conv2: conv(&mut p, &format!("vel.block{b}.conv2"), w, w, 3, rng),
            })
            .collect();
        let output = (p.add_zeros("vel.out.w", &[c, w, 3, 3]), p.add_zeros("vel.out.b", &[c]));
        let h0 = p.add_zeros("filter.h0", &[1, d]);
        let pool = conv(&mut p, "filter.pool", c, d, 1, rng);
        let gates = ["z", "r", "n"];
        let gru_x = gates.map(|g| p.add_uniform(&format!("filter.gru.w{g}"), &[d + e, d], d + e, rng));
        let gru_h = gates.map(|g| p.add_uniform(&format!("filter.gru.u{g}"), &[d, d], d, rng));
        let gru_b = gates.map(|g| p.add_zeros(&format!("filter.gru.b{g}"), &[d]));
        Ok(FlowModel {
            arch,
            params: p,
            ids: Ids {
                time,
                film_scale,
                film_shift,
                input,
                blocks,
                output,
                h0,
                pool,
                gru_x,
                gru_h,
                gru_b,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn conv(&self, g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let k = self.params.value(w).shape()[2];
        let xp = g.pad_periodic(x, k / 2)?;
        let y = g.conv2d(xp, wv, 0)?;
        let bv = g.param(&self.params, b);
        g.add_bias(y, bv)
    }

    fn dense(&self, g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let y = g.matmul(x, wv)?;
        let bv = g.param(&self.params, b);
        g.add_bias(y, bv)
    }

    /// Evaluate one filter update outside of training.
    pub fn filter_step(&self, prev: &FilterState, x_noisy: &Tensor, t: f64) -> Result<FilterState> {
        let c = self.arch.latent_channels;
        if x_noisy.ndim() != 3 || x_noisy.shape()[0] != c {
            return Err(Error::contract(format!(
                "filter input must be [{c}, h, w], got {:?}",
                x_noisy.shape()
            )));
        }
        if prev.h.shape() != [self.arch.hidden] {
            return Err(Error::contract("filter state has the wrong size"));
        }
        let mut g = Graph::new();
        let h = g.input(prev.h.clone().reshape(&[1, self.arch.hidden])?);
        let x = g.input(x_noisy.clone().reshape(&[1, c, x_noisy.shape()[1], x_noisy.shape()[2]])?);
        let out = self.filter(&mut g, h, x, &[t])?;
        Ok(FilterState {
            h: g.value(out).clone().reshape(&[self.arch.hidden])?,
            step_index: prev.step_index + 1,
        })
    }

    pub fn initial_state(&self) -> FilterState {
        FilterState {
            h: self.params.value(self.ids.h0).map(f64::tanh).reshape(&[self.arch.hidden]).expect("h0"),
            step_index: 0,
        }
    }

    /// Evaluate the velocity for one sample outside of training.
    pub fn predict_velocity(&self, x_t: &Tensor, t: f64, h: &FilterState) -> Result<Tensor> {
        let shape = x_t.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::contract(format!("latent grid must be [C, h, w], got {shape:?}")));
        }
        let mut g = Graph::new();
        let x = g.input(x_t.clone().reshape(&[1, shape[0], shape[1], shape[2]])?);
        let hv = g.input(h.h.clone().reshape(&[1, self.arch.hidden])?);
        let v = self.velocity(&mut g, x, &[t], hv)?;
        g.value(v).clone().reshape(&shape)
    }
}

impl Forcing for FlowModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn initial_filter(&self, g: &mut Graph, batch: usize) -> Result<Var> {
        let h0 = g.param(&self.params, self.ids.h0);
        let t = g.tanh(h0)?;
        let ones = g.input(Tensor::full(&[batch, 1], 1.0));
        g.matmul(ones, t)
    }

    /// Gated recurrent update from a mean-pooled projection of the noisy state and its time.
    fn filter(&self, g: &mut Graph, h: Var, x_noisy: Var, t: &[f64]) -> Result<Var> {
        let proj = self.conv(g, x_noisy, self.ids.pool)?;
        let act = g.gelu(proj)?;
        let pooled = g.mean_spatial(act)?;
        let e = g.input(embed_batch(t, self.arch.time_dim));
        let inp = g.concat(pooled, e)?;
        let gate = |g: &mut Graph, i: usize, hh: Var| -> Result<Var> {
            let wx = g.param(&self.params, self.ids.gru_x[i]);
            let wh = g.param(&self.params, self.ids.gru_h[i]);
            let a = g.matmul(inp, wx)?;
            let b = g.matmul(hh, wh)?;
            let s = g.add(a, b)?;
            let bias = g.param(&self.params, self.ids.gru_b[i]);
            g.add_bias(s, bias)
        };
        let zp = gate(g, 0, h)?;
        let z = g.sigmoid(zp)?;
        let rp = gate(g, 1, h)?;
        let r = g.sigmoid(rp)?;
        let rh = g.mul(r, h)?;
        let np = gate(g, 2, rh)?;
        let n = g.tanh(np)?;
        let keep = g.mul(z, h)?;
        let zn = g.mul(z, n)?;
        let fresh = g.sub(n, zn)?;
        g.add(fresh, keep)
    }

    fn velocity(&self, g: &mut Graph, x: Var, t: &[f64], h: Var) -> Result<Var> {
        let e = g.input(embed_batch(t, self.arch.time_dim));
        let tp = self.dense(g, e, self.ids.time)?;
        let temb = g.gelu(tp)?;
        let scale = self.dense(g, temb, self.ids.film_scale)?;
        let scale = g.add_scalar(scale, 1.0)?;
        let shift = self.dense(g, temb, self.ids.film_shift)?;
        let a = self.conv(g, x, self.ids.input)?;
        let a = g.mul_channel(a, scale)?;
        let mut a = g.add_channel(a, shift)?;
        let cond = g.concat(temb, h)?;
        for block in &self.ids.blocks {
            let c = self.dense(g, cond, block.cond)?;
            let r = self.conv(g, a, block.conv1)?;
            let r = g.layer_norm(r)?;
            let r = g.add_channel(r, c)?;
            let r = g.gelu(r)?;
            let r = self.conv(g, r, block.conv2)?;
            a = g.add(a, r)?;
        }
        let o = g.layer_norm(a)?;
        let o = g.gelu(o)?;
        self.conv(g, o, self.ids.output)
    }
}
