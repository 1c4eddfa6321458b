use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    None,
    /// right operand has leading dim 1 and is repeated along the batch axis
    Batch,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    MulRows(Var, Vec<f64>),
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Conv2d { x: Var, w: Var, pad: usize },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LayerNorm(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    Concat(Var, Var),
    PadPeriodic(Var, usize),
    /// Output element `i` is input element `map[i]`.
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A tape of tensor operations supporting reverse-mode differentiation.
///
/// Each forward op checks shapes and finiteness; a non-finite result is
/// reported with the op that produced it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

/// `[B, C, S...]` viewed as (B, C, prod(S)).
fn channel_view(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.ndim() < 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (b, c) = (t.shape()[0], t.shape()[1]);
    Ok((b, c, t.numel() / (b * c).max(1)))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a parameter as a differentiable leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Forward identity whose output carries no gradient back to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name.to_string() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<Bcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(Bcast::None);
        }
        if !sa.is_empty() && sb.len() == sa.len() && sb[0] == 1 && sb[1..] == sa[1..] {
            return Ok(Bcast::Batch);
        }
        Err(Error::Dimension {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let mode = self.bcast(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let inner = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % inner]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, mode))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, m) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b, m), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, m) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b, m), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, m) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b, m), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a], "add_scalar")
    }

    /// Multiply sample `i` of the leading axis by the constant `factors[i]`.
    pub fn mul_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() == 0 || ta.shape()[0] != factors.len() {
            return Err(Error::Dimension {
                op: "mul_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let inner = ta.numel() / factors.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * factors[i / inner])
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(v, Op::MulRows(a, factors.to_vec()), &[a], "mul_rows")
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let v = Tensor::new(vec![m, n], out)?;
        self.push(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Add `bias: [C]` along axis 1 of `x: [B, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, s) = channel_view(self.value(x), "add_bias")?;
        let tb = self.value(bias);
        if tb.shape() != [c] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let bd = tb.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                for v in &mut out.data_mut()[(bi * c + ci) * s..][..s] {
                    *v += bd[ci];
                }
            }
        }
        self.push(out, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    fn channel_operand(&self, x: Var, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let (b, c, s) = channel_view(self.value(x), op)?;
        if self.value(v).shape() != [b, c] {
            return Err(Error::Dimension {
                op,
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        Ok((b, c, s))
    }

    /// Add a per-sample channel vector `v: [B, C]` to every spatial site of `x: [B, C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (b, c, s) = self.channel_operand(x, v, "add_channel")?;
        let mut out = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(s).enumerate().take(b * c) {
            for e in chunk {
                *e += vd[i];
            }
        }
        self.push(out, Op::AddChannel(x, v), &[x, v], "add_channel")
    }

    /// Multiply every spatial site of `x: [B, C, ...]` by `v: [B, C]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (b, c, s) = self.channel_operand(x, v, "mul_channel")?;
        let mut out = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(s).enumerate().take(b * c) {
            for e in chunk {
                *e *= vd[i];
            }
        }
        self.push(out, Op::MulChannel(x, v), &[x, v], "mul_channel")
    }

    /// Stride-1 convolution with symmetric zero padding, `x: [B,Cin,H,W]`, `w: [Cout,Cin,K,K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, pad)?;
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        let v = Tensor::new(vec![geom.batch, geom.cout, geom.out_h(), geom.out_w()], out)?;
        self.push(v, Op::Conv2d { x, w, pad }, &[x, w], "conv2d")
    }

    fn conv_geom(&self, x: Var, w: Var, pad: usize) -> Result<ConvGeom> {
        let (b, cin, h, wd) = dims4(self.value(x), "conv2d")?;
        let (cout, cin2, k, k2) = dims4(self.value(w), "conv2d")?;
        if cin != cin2 || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        Ok(ConvGeom {
            batch: b,
            cin,
            cout,
            h,
            w: wd,
            k,
            pad,
        })
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let v = self.value(x).avg_pool(factor)?;
        self.push(v, Op::AvgPool(x, factor), &[x], "avg_pool")
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let (lead, h, w) = t.split_spatial("upsample")?;
        let mut out = vec![0.0; lead * h * w * factor * factor];
        kernels::upsample(t.data(), lead, h, w, factor, &mut out);
        let mut shape = t.shape().to_vec();
        let n = shape.len();
        shape[n - 2] *= factor;
        shape[n - 1] *= factor;
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Upsample(x, factor), &[x], "upsample")
    }

    /// `[B, C, H, W] -> [B, C f^2, H/f, W/f]`; channel `c f^2 + dy f + dx` holds offset `(dy, dx)`.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.value(x), "space_to_depth")?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Dimension {
                op: "space_to_depth",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![f, f],
            });
        }
        let (oh, ow) = (h / f, w / f);
        let mut map = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for dy in 0..f {
                    for dx in 0..f {
                        for y in 0..oh {
                            for xx in 0..ow {
                                map.push(((bi * c + ci) * h + y * f + dy) * w + xx * f + dx);
                            }
                        }
                    }
                }
            }
        }
        self.gather(x, map, vec![b, c * f * f, oh, ow], "space_to_depth")
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        let (b, cf, h, w) = dims4(self.value(x), "depth_to_space")?;
        if f == 0 || cf % (f * f) != 0 {
            return Err(Error::Dimension {
                op: "depth_to_space",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![f, f],
            });
        }
        let c = cf / (f * f);
        let (oh, ow) = (h * f, w * f);
        let mut map = Vec::with_capacity(b * cf * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let ch = ci * f * f + (y % f) * f + xx % f;
                        map.push(((bi * cf + ch) * h + y / f) * w + xx / f);
                    }
                }
            }
        }
        self.gather(x, map, vec![b, c, oh, ow], "depth_to_space")
    }

    fn gather(&mut self, x: Var, map: Vec<usize>, shape: Vec<usize>, name: &str) -> Result<Var> {
        let src = self.value(x).data();
        let v = Tensor::new(shape, map.iter().map(|&i| src[i]).collect())?;
        self.push(v, Op::Gather(x, map), &[x], name)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(kernels::gelu);
        self.push(v, Op::Gelu(x), &[x], "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), &[x], "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x], "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x], "exp")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x), &[x], "square")
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        self.push(v, Op::Clamp(x, lo, hi), &[x], "clamp")
    }

    /// Normalization across axis 1 (channels) at every other index.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = channel_view(self.value(x), "layer_norm")?;
        let (out, inv) = kernels::layer_norm(self.value(x).data(), b, c, s);
        let v = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(v, Op::LayerNorm(x, inv), &[x], "layer_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x), &[x], "mean")
    }

    /// Mean over every axis after the first two: `[B, C, ...] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = channel_view(self.value(x), "mean_spatial")?;
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|ch| ch.iter().sum::<f64>() / s as f64)
            .collect();
        let v = Tensor::new(vec![b, c], data)?;
        self.push(v, Op::MeanSpatial(x), &[x], "mean_spatial")
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, ca, sa) = channel_view(ta, "concat")?;
        let (bb, cb, sb) = channel_view(tb, "concat")?;
        if ba != bb || sa != sb || ta.shape()[2..] != tb.shape()[2..] {
            return Err(Error::Dimension {
                op: "concat",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for bi in 0..ba {
            data.extend_from_slice(&ta.data()[bi * ca * sa..][..ca * sa]);
            data.extend_from_slice(&tb.data()[bi * cb * sb..][..cb * sb]);
        }
        let mut shape = ta.shape().to_vec();
        shape[1] = ca + cb;
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Concat(a, b), &[a, b], "concat")
    }

    /// Wrap-around padding of the two spatial axes of `x: [B, C, H, W]` by `p` cells.
    pub fn pad_periodic(&mut self, x: Var, p: usize) -> Result<Var> {
        if p == 0 {
            return Ok(x);
        }
        let (b, c, h, w) = dims4(self.value(x), "pad_periodic")?;
        if p > h || p > w {
            return Err(Error::contract(format!("periodic pad {p} exceeds grid {h}x{w}")));
        }
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * ph * pw];
        for (plane, dst) in xd.chunks(h * w).zip(out.chunks_mut(ph * pw)) {
            for i in 0..ph {
                let si = (i + h - p) % h;
                for j in 0..pw {
                    dst[i * pw + j] = plane[si * w + (j + w - p) % w];
                }
            }
        }
        let v = Tensor::new(vec![b, c, ph, pw], out)?;
        self.push(v, Op::PadPeriodic(x, p), &[x], "pad_periodic")
    }

    /// Back-propagate from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions from node `i` to each of its parents.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let reduce_b = |g: Vec<f64>, b: Var, mode: Bcast| -> Vec<f64> {
            match mode {
                Bcast::None => g,
                Bcast::Batch => {
                    let inner = self.nodes[b.0].value.numel();
                    let mut out = vec![0.0; inner];
                    for (k, x) in g.iter().enumerate() {
                        out[k % inner] += x;
                    }
                    out
                }
            }
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b, m) => vec![(*a, g.to_vec()), (*b, reduce_b(g.to_vec(), *b, *m))],
            Op::Sub(a, b, m) => vec![
                (*a, g.to_vec()),
                (*b, reduce_b(g.iter().map(|x| -x).collect(), *b, *m)),
            ],
            Op::Mul(a, b, m) => {
                let (va, vb) = (val(*a), val(*b));
                let inner = vb.len();
                let ga = g.iter().enumerate().map(|(k, x)| x * vb[k % inner]).collect();
                let gb = g.iter().enumerate().map(|(k, x)| x * va[k]).collect();
                vec![(*a, ga), (*b, reduce_b(gb, *b, *m))]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MulRows(a, f) => {
                let inner = g.len() / f.len();
                vec![(*a, g.iter().enumerate().map(|(k, x)| x * f[k / inner]).collect())]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = vec![];
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, tb.data(), true, &mut ga, false);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g, false, &mut gb, false);
                    out.push((*b, gb));
                }
                out
            }
            Op::AddBias(x, bias) => {
                let c = self.nodes[bias.0].value.numel();
                let (b, s) = (self.nodes[x.0].value.shape()[0], g.len() / (self.nodes[x.0].value.shape()[0] * c));
                let mut gb = vec![0.0; c];
                for bi in 0..b {
                    for (ci, acc) in gb.iter_mut().enumerate() {
                        *acc += g[(bi * c + ci) * s..][..s].iter().sum::<f64>();
                    }
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::AddChannel(x, v) => {
                let bc = self.nodes[v.0].value.numel();
                let s = g.len() / bc;
                let gv = g.chunks(s).map(|ch| ch.iter().sum()).collect();
                vec![(*x, g.to_vec()), (*v, gv)]
            }
            Op::MulChannel(x, v) => {
                let vd = val(*v);
                let xd = val(*x);
                let s = g.len() / vd.len();
                let gx = g.iter().enumerate().map(|(k, e)| e * vd[k / s]).collect();
                let gv = g
                    .chunks(s)
                    .zip(xd.chunks(s))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                vec![(*x, gx), (*v, gv)]
            }
            Op::Conv2d { x, w, pad } => {
                let geom = self.conv_geom(*x, *w, *pad).expect("validated in forward");
                let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), g, &geom, needs(*x), needs(*w));
                let mut out = vec![];
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
                out
            }
            Op::AvgPool(x, f) => {
                let t = &self.nodes[x.0].value;
                let (lead, h, w) = t.split_spatial("avg_pool").expect("validated in forward");
                let mut gx = vec![0.0; t.numel()];
                kernels::upsample(g, lead, h / f, w / f, *f, &mut gx);
                let norm = 1.0 / (f * f) as f64;
                gx.iter_mut().for_each(|v| *v *= norm);
                vec![(*x, gx)]
            }
            Op::Upsample(x, f) => {
                let t = &self.nodes[x.0].value;
                let (lead, h, w) = t.split_spatial("upsample").expect("validated in forward");
                let mut gx = vec![0.0; t.numel()];
                kernels::block_sum(g, lead, h, w, *f, &mut gx);
                vec![(*x, gx)]
            }
            Op::Gather(x, map) => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (e, &i) in g.iter().zip(map) {
                    gx[i] += e;
                }
                vec![(*x, gx)]
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                vec![(*x, g.iter().zip(xd).map(|(e, &a)| e * kernels::gelu_grad(a)).collect())]
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                vec![(*x, g.iter().zip(y).map(|(e, t)| e * (1.0 - t * t)).collect())]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                vec![(*x, g.iter().zip(y).map(|(e, s)| e * s * (1.0 - s)).collect())]
            }
            Op::Exp(x) => {
                let y = node.value.data();
                vec![(*x, g.iter().zip(y).map(|(e, v)| e * v).collect())]
            }
            Op::Square(x) => {
                let xd = val(*x);
                vec![(*x, g.iter().zip(xd).map(|(e, v)| 2.0 * e * v).collect())]
            }
            Op::Clamp(x, lo, hi) => {
                let xd = val(*x);
                vec![(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(e, &v)| if v < *lo || v > *hi { 0.0 } else { *e })
                        .collect(),
                )]
            }
            Op::LayerNorm(x, inv) => {
                let (b, c, s) = channel_view(&node.value, "layer_norm").expect("validated in forward");
                vec![(*x, kernels::layer_norm_backward(node.value.data(), inv, g, b, c, s))]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.numel()])],
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::MeanSpatial(x) => {
                let n = self.nodes[x.0].value.numel();
                let s = n / g.len();
                vec![(*x, (0..n).map(|k| g[k / s] / s as f64).collect())]
            }
            Op::Concat(a, b) => {
                let (ba, ca, sa) = channel_view(&self.nodes[a.0].value, "concat").expect("validated");
                let cb = self.nodes[b.0].value.shape()[1];
                let mut ga = Vec::with_capacity(ba * ca * sa);
                let mut gb = Vec::with_capacity(ba * cb * sa);
                for bi in 0..ba {
                    let row = &g[bi * (ca + cb) * sa..][..(ca + cb) * sa];
                    ga.extend_from_slice(&row[..ca * sa]);
                    gb.extend_from_slice(&row[ca * sa..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::PadPeriodic(x, p) => {
                let t = &self.nodes[x.0].value;
                let (h, w) = (t.shape()[2], t.shape()[3]);
                let (ph, pw) = (h + 2 * p, w + 2 * p);
                let mut gx = vec![0.0; t.numel()];
                for (src, dst) in g.chunks(ph * pw).zip(gx.chunks_mut(h * w)) {
                    for i in 0..ph {
                        let si = (i + h - p) % h;
                        for j in 0..pw {
                            dst[si * w + (j + w - p) % w] += src[i * pw + j];
                        }
                    }
                }
                vec![(*x, gx)]
            }
        }
    }

    /// Gradients of every bound parameter, laid out like `store`.
    pub fn param_grads(&self, store: &ParamStore) -> Grads {
        let mut grads = Grads::zeros_like(store);
        for (&id, &v) in &self.params {
            if id.namespace() != store.namespace() {
                continue;
            }
            if let Some(g) = self.grad(v) {
                grads.add_slice(id, g.data());
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2.0]), true);
        let x = g.leaf(t(&[3.0]), true);
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[3.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]), true);
        let sq = g.square(x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]), true);
        let sq = g.square(x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]), true);
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn stop_gradient_detaches_one_branch() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3.0]), true);
        let d = g.stop_gradient(x);
        assert_eq!(g.value(d).data(), &[3.0]);
        let p = g.mul(d, x).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut g = Graph::new();
        let x = g.input(t(&[1000.0]));
        let err = g.exp(x).unwrap_err();
        assert!(err.to_string().contains("exp"), "{err}");
    }

    #[test]
    fn batch_broadcast_add() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap(), true);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn add_rejects_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }
}
