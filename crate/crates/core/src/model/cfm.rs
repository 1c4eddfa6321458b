//! Window objective: three bridge terms over four consecutive latent states.
//!
//! Term `s` bridges state `s` to state `s + 1` on the pyramid level of its
//! target. The source is taken at its own (coarser or equal) level and
//! upsampled, so every state enters at exactly its pyramid resolution. The
//! filter state used by term `s` has seen the noisy inputs of terms `0..s`.

use serde::{Deserialize, Serialize};

use super::{Forcing, PyramidSpec};
use crate::error::{Error, Result};
use crate::kernel::bridge_with_noise;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Distribution on [0, 1] used for t and k at training time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler01 {
    Uniform,
    Fixed(f64),
}

impl Sampler01 {
    pub fn draw(&self, rng: &mut Rng) -> f64 {
        match *self {
            Sampler01::Uniform => rng.uniform(),
            Sampler01::Fixed(v) => v,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        match *self {
            Sampler01::Fixed(v) if !(0.0..=1.0).contains(&v) => {
                Err(Error::config(format!("{name} fixed value {v} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-sample draws for one bridge term; `z` is `[B, C, h, w]` on the term's level.
#[derive(Clone, Debug, PartialEq)]
pub struct TermDraws {
    pub t: Vec<f64>,
    pub k: Vec<f64>,
    pub z: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowDraws {
    pub terms: Vec<TermDraws>,
}

impl WindowDraws {
    /// Independent (t, k, z) per sample and per term.
    pub fn sample(rng: &mut Rng, term_shapes: &[Vec<usize>], t: Sampler01, k: Sampler01) -> Self {
        let terms = term_shapes
            .iter()
            .map(|shape| {
                let b = shape[0];
                let ts = (0..b).map(|_| t.draw(rng)).collect();
                let ks = (0..b).map(|_| k.draw(rng)).collect();
                TermDraws {
                    t: ts,
                    k: ks,
                    z: rng.normal_tensor(shape),
                }
            })
            .collect();
        WindowDraws { terms }
    }
}

/// Average-pool each of the four states by its factor; oldest coarsest.
pub fn pyramid_down(states: &[Tensor], spec: &PyramidSpec) -> Result<Vec<Tensor>> {
    if states.len() != 4 {
        return Err(Error::contract(format!("window must have 4 states, got {}", states.len())));
    }
    let side = *states[0].shape().last().ok_or_else(|| Error::contract("empty state"))?;
    spec.validate(side)?;
    states.iter().zip(spec.factors).map(|(s, f)| s.avg_pool(f)).collect()
}

/// `(source, target)` per term from pyramid levels.
pub fn term_inputs(levels: &[Tensor], spec: &PyramidSpec) -> Result<Vec<(Tensor, Tensor)>> {
    if levels.len() != 4 {
        return Err(Error::contract(format!("window must have 4 states, got {}", levels.len())));
    }
    let f = spec.factors;
    (0..3)
        .map(|s| Ok((levels[s].upsample(f[s] / f[s + 1])?, levels[s + 1].clone())))
        .collect()
}

/// Value of each term and the graph node of their sum.
#[derive(Clone, Debug)]
pub struct CfmTerms {
    pub total: Var,
    pub terms: Vec<Var>,
}

fn bridge_batch(src: &Tensor, tgt: &Tensor, d: &TermDraws) -> Result<(Tensor, Tensor)> {
    let b = src.shape()[0];
    if d.t.len() != b || d.k.len() != b || d.z.shape() != src.shape() {
        return Err(Error::contract("draws do not match the window batch"));
    }
    let mut noisy = Vec::with_capacity(b);
    let mut resid = Vec::with_capacity(b);
    for i in 0..b {
        let s = bridge_with_noise(&src.index(i), &tgt.index(i), d.t[i], d.k[i], d.z.index(i))?;
        resid.push(s.preconditioned_target());
        noisy.push(s.x_t);
    }
    Ok((Tensor::stack(&noisy)?, Tensor::stack(&resid)?))
}

/// Summed preconditioned loss of the three terms, batch-averaged.
///
/// `levels` are the batched pyramid levels `[B, C, h_s, w_s]` of a window.
pub fn cfm_loss<M: Forcing>(
    model: &M,
    g: &mut Graph,
    levels: &[Tensor],
    spec: &PyramidSpec,
    draws: &WindowDraws,
) -> Result<CfmTerms> {
    let inputs = term_inputs(levels, spec)?;
    if draws.terms.len() != 3 {
        return Err(Error::contract("window draws must cover 3 terms"));
    }
    let batch = levels[0].shape()[0];
    let mut h = model.initial_filter(g, batch)?;
    let mut terms = Vec::with_capacity(3);
    for (s, ((src, tgt), d)) in inputs.iter().zip(&draws.terms).enumerate() {
        let (noisy, resid) = bridge_batch(src, tgt, d)?;
        let x = g.input(noisy);
        let pred = model.velocity(g, x, &d.t, h)?;
        let w: Vec<f64> = d.t.iter().map(|t| 1.0 - t).collect();
        let scaled = g.mul_rows(pred, &w)?;
        let r = g.input(resid);
        let diff = g.sub(scaled, r)?;
        let sq = g.square(diff)?;
        let m = g.mean(sq)?;
        terms.push(g.scale(m, 0.5)?);
        if s < 2 {
            h = model.filter(g, h, x, &d.t)?;
        }
    }
    let partial = g.add(terms[0], terms[1])?;
    let total = g.add(partial, terms[2])?;
    Ok(CfmTerms { total, terms })
}
