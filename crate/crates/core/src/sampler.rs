//! Euler probability-flow ODE and Euler-Maruyama SDE samplers, next-state
//! generation from a clean history, autoregressive rollout and ensemble statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{term_inputs, FlowModel, Forcing, PyramidSpec};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

/// A velocity field evaluated on a batch `[B, C, h, w]` at a shared time.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    pub steps: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { steps: 100 }
    }
}

impl OdeConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sampler steps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub eta: f64,
    /// Lower bound on the score variance; the drift coefficient is `eta^2 / eps_floor^2`.
    pub eps_floor: f64,
    pub steps: usize,
}

impl SdeConfig {
    pub fn ode(&self) -> OdeConfig {
        OdeConfig { steps: self.steps }
    }

    pub fn validate(&self) -> Result<()> {
        self.ode().validate()?;
        if !(self.eta >= 0.0) || !(self.eps_floor > 0.0) {
            return Err(Error::config(format!("need eta >= 0 and eps_floor > 0, got {self:?}")));
        }
        Ok(())
    }
}

fn checked_velocity<V: VelocityField + ?Sized>(field: &V, x: &Tensor, t: f64, dt: f64) -> Result<Tensor> {
    if t + dt > 1.0 + 1e-12 {
        return Err(Error::contract(format!("step from t={t} with dt={dt} passes t=1")));
    }
    let g = field.velocity(x, t)?;
    x.expect_same_shape(&g, "velocity")?;
    if !g.is_finite() {
        return Err(Error::Numeric {
            op: format!("velocity at t={t}"),
        });
    }
    Ok(g)
}

/// `x + dt g(x, t)`.
pub fn ode_step<V: VelocityField + ?Sized>(field: &V, x: &Tensor, t: f64, cfg: &OdeConfig) -> Result<(Tensor, f64)> {
    let dt = cfg.dt();
    let g = checked_velocity(field, x, t, dt)?;
    Ok((x.axpy(dt, &g)?, t + dt))
}

/// `x + [g + 0.5 eta^2 (1 - t)(x - anchor - t g)] dt + eta (1 - t) sqrt(dt) xi`.
///
/// With `eta = 0` the update is the ODE step bit for bit and no noise is drawn.
pub fn sde_step<V: VelocityField + ?Sized>(
    field: &V,
    x: &Tensor,
    t: f64,
    anchor: &Tensor,
    cfg: &SdeConfig,
    rng: &mut Rng,
) -> Result<(Tensor, f64)> {
    let dt = cfg.ode().dt();
    let g = checked_velocity(field, x, t, dt)?;
    if cfg.eta == 0.0 {
        return Ok((x.axpy(dt, &g)?, t + dt));
    }
    x.expect_same_shape(anchor, "sde anchor")?;
    let c = 0.5 * cfg.eta * cfg.eta / (cfg.eps_floor * cfg.eps_floor) * (1.0 - t);
    let sigma = cfg.eta * (1.0 - t) * dt.sqrt();
    let xi = rng.normal_tensor(x.shape());
    let data = (0..x.numel())
        .map(|i| {
            let (xv, gv) = (x.data()[i], g.data()[i]);
            let drift = gv + c * (xv - anchor.data()[i] - t * gv);
            xv + drift * dt + sigma * xi.data()[i]
        })
        .collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    if !out.is_finite() {
        return Err(Error::Numeric {
            op: format!("sde step at t={t}"),
        });
    }
    Ok((out, t + dt))
}

/// Integrate from t = 0 to 1 with `cfg.steps` Euler steps.
pub fn integrate_ode<V: VelocityField + ?Sized>(field: &V, x0: &Tensor, cfg: &OdeConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut x = x0.clone();
    for i in 0..cfg.steps {
        let t = i as f64 / cfg.steps as f64;
        x = ode_step(field, &x, t, cfg)?.0;
    }
    Ok(x)
}

pub fn integrate_sde<V: VelocityField + ?Sized>(
    field: &V,
    x0: &Tensor,
    anchor: &Tensor,
    cfg: &SdeConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut x = x0.clone();
    for i in 0..cfg.steps {
        let t = i as f64 / cfg.steps as f64;
        x = sde_step(field, &x, t, anchor, cfg, rng)?.0;
    }
    Ok(x)
}

/// Velocity of a trained model conditioned on three clean history states.
///
/// At every call the two history bridges are rebuilt at `k = 1` and the shared
/// time `t`, filtered, and the resulting state conditions the velocity.
pub struct ConditionedModel<'a> {
    model: &'a FlowModel,
    history: Vec<(Tensor, Tensor)>,
}

impl<'a> ConditionedModel<'a> {
    /// `history` holds the last three clean states, each `[B, C, h, w]`, oldest first.
    pub fn new(model: &'a FlowModel, spec: &PyramidSpec, history: &[Tensor]) -> Result<Self> {
        if history.len() != 3 {
            return Err(Error::contract(format!("need 3 history states, got {}", history.len())));
        }
        let f = spec.factors;
        let mut levels = Vec::with_capacity(4);
        for (s, h) in history.iter().enumerate() {
            levels.push(h.avg_pool(f[s])?);
        }
        levels.push(history[2].clone());
        let mut inputs = term_inputs(&levels, spec)?;
        inputs.truncate(2);
        Ok(ConditionedModel { model, history: inputs })
    }

    /// Clean newest state on the level of the generated one.
    pub fn last_state(model_spec: &PyramidSpec, history: &[Tensor]) -> Result<Tensor> {
        let f = model_spec.factors;
        history[2].avg_pool(f[2])?.upsample(f[2] / f[3])
    }
}

impl VelocityField for ConditionedModel<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let b = x.shape()[0];
        let ts = vec![t; b];
        let mut g = Graph::new();
        let mut h = self.model.initial_filter(&mut g, b)?;
        for (src, tgt) in &self.history {
            let noisy = tgt.zip_map(src, "history bridge", |y, x0| t * y + (1.0 - t) * x0)?;
            let nv = g.input(noisy);
            h = self.model.filter(&mut g, h, nv, &ts)?;
        }
        let xv = g.input(x.clone());
        let v = self.model.velocity(&mut g, xv, &ts, h)?;
        Ok(g.value(v).clone())
    }
}

/// How the next state is integrated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Integrator {
    Ode(OdeConfig),
    Sde(SdeConfig),
}

impl Integrator {
    pub fn validate(&self) -> Result<()> {
        match self {
            Integrator::Ode(c) => c.validate(),
            Integrator::Sde(c) => c.validate(),
        }
    }
}

/// Generate the state following `history` for a batch `[B, C, h, w]`.
///
/// Starts from `k3 x_last + (1 - k3) z`; member `i` of the batch draws its
/// noise from `rngs[i]`.
pub fn generate_next(
    model: &FlowModel,
    spec: &PyramidSpec,
    history: &[Tensor],
    k3: f64,
    integrator: &Integrator,
    rngs: &mut [Rng],
) -> Result<Tensor> {
    if history.len() < 3 {
        return Err(Error::contract(format!("need at least 3 history states, got {}", history.len())));
    }
    if !(0.0..=1.0).contains(&k3) {
        return Err(Error::contract(format!("k3 = {k3} outside [0, 1]")));
    }
    integrator.validate()?;
    let history = &history[history.len() - 3..];
    let b = history[2].shape()[0];
    if rngs.len() != b {
        return Err(Error::contract(format!("{} random streams for batch {b}", rngs.len())));
    }
    let field = ConditionedModel::new(model, spec, history)?;
    let last = ConditionedModel::last_state(spec, history)?;
    let member_shape = &last.shape()[1..];
    let mut x = if k3 == 1.0 {
        last.clone()
    } else {
        let z = Tensor::stack(&rngs.iter_mut().map(|r| r.normal_tensor(member_shape)).collect::<Vec<_>>())?;
        last.zip_map(&z, "noisy init", |a, e| k3 * a + (1.0 - k3) * e)?
    };
    match integrator {
        Integrator::Ode(cfg) => integrate_ode(&field, &x, cfg),
        Integrator::Sde(cfg) => {
            for i in 0..cfg.steps {
                let t = i as f64 / cfg.steps as f64;
                x = if cfg.eta == 0.0 {
                    ode_step(&field, &x, t, &cfg.ode())?.0
                } else {
                    batched_sde_step(&field, &x, t, &last, cfg, rngs)?
                };
            }
            Ok(x)
        }
    }
}

/// SDE step where each batch member draws from its own stream.
fn batched_sde_step<V: VelocityField + ?Sized>(
    field: &V,
    x: &Tensor,
    t: f64,
    anchor: &Tensor,
    cfg: &SdeConfig,
    rngs: &mut [Rng],
) -> Result<Tensor> {
    let dt = cfg.ode().dt();
    let g = checked_velocity(field, x, t, dt)?;
    let c = 0.5 * cfg.eta * cfg.eta / (cfg.eps_floor * cfg.eps_floor) * (1.0 - t);
    let sigma = cfg.eta * (1.0 - t) * dt.sqrt();
    let inner = x.numel() / rngs.len();
    let mut out = Vec::with_capacity(x.numel());
    for (m, rng) in rngs.iter_mut().enumerate() {
        for i in m * inner..(m + 1) * inner {
            let (xv, gv) = (x.data()[i], g.data()[i]);
            let drift = gv + c * (xv - anchor.data()[i] - t * gv);
            out.push(xv + drift * dt + sigma * rng.normal());
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Autoregressive rollout of `horizon` states from a batch of clean histories.
///
/// `monitor(step, state)` sees every generated state (1-based step) and may
/// stop the rollout early by returning `false`.
pub fn rollout(
    model: &FlowModel,
    spec: &PyramidSpec,
    initial: &[Tensor],
    horizon: usize,
    integrator: &Integrator,
    rngs: &mut [Rng],
    monitor: &mut dyn FnMut(usize, &Tensor) -> Result<bool>,
) -> Result<Vec<Tensor>> {
    if horizon == 0 {
        return Err(Error::contract("rollout horizon must be >= 1"));
    }
    let mut window: Vec<Tensor> = initial.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for step in 1..=horizon {
        let next = generate_next(model, spec, &window, 1.0, integrator, rngs)?;
        let keep = monitor(step, &next)?;
        window.push(next.clone());
        window.remove(0);
        out.push(next);
        if !keep {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub mean: Tensor,
    pub variance: Tensor,
    pub mean_variance: f64,
}

/// Per-cell mean and unbiased variance across members.
pub fn ensemble_stats(members: &[Tensor]) -> Result<EnsembleStats> {
    if members.len() < 2 {
        return Err(Error::contract(format!("need at least 2 members, got {}", members.len())));
    }
    let n = members.len() as f64;
    let shape = members[0].shape().to_vec();
    let mut mean = Tensor::zeros(&shape);
    for m in members {
        mean = mean.add(m)?;
    }
    let mean = mean.scale(1.0 / n);
    let mut ss = Tensor::zeros(&shape);
    for m in members {
        let d = m.sub(&mean)?;
        ss = ss.add(&d.zip_map(&d, "variance", |a, b| a * b)?)?;
    }
    let variance = ss.scale(1.0 / (n - 1.0));
    let mean_variance = variance.mean();
    Ok(EnsembleStats {
        mean,
        variance,
        mean_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let zero = |x: &Tensor, _t: f64| Ok(Tensor::zeros(x.shape()));
        let x = s(1.7);
        assert_eq!(integrate_ode(&zero, &x, &OdeConfig::default()).unwrap(), x);
    }

    #[test]
    fn constant_field_single_step() {
        let c = |x: &Tensor, _t: f64| Ok(Tensor::full(x.shape(), 3.0));
        let (x, t) = ode_step(&c, &s(1.0), 0.0, &OdeConfig::default()).unwrap();
        assert!((x.item() - 1.03).abs() < 1e-15);
        assert!((t - 0.01).abs() < 1e-15);
    }

    #[test]
    fn step_past_one_is_rejected() {
        let c = |x: &Tensor, _t: f64| Ok(Tensor::zeros(x.shape()));
        assert!(ode_step(&c, &s(0.0), 0.995, &OdeConfig::default()).is_err());
    }

    #[test]
    fn non_finite_velocity_reports_time() {
        let bad = |x: &Tensor, _t: f64| Ok(Tensor::full(x.shape(), f64::NAN));
        match ode_step(&bad, &s(0.0), 0.25, &OdeConfig::default()) {
            Err(Error::Numeric { op }) => assert!(op.contains("0.25")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn analytic_field_lands_on_target() {
        let x1 = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let x0 = Tensor::new(vec![1, 3], vec![0.2, 0.3, -0.4]).unwrap();
        let target = x1.clone();
        let field = move |x: &Tensor, t: f64| Ok(target.sub(x)?.scale(1.0 / (1.0 - t)));
        let end = integrate_ode(&field, &x0, &OdeConfig::default()).unwrap();
        assert!(crate::pde::l2re(&end, &x1).unwrap() < 1e-3);
    }

    #[test]
    fn sde_drift_correction_vanishes_at_anchor() {
        let c = |x: &Tensor, _t: f64| Ok(Tensor::full(x.shape(), 2.0));
        let cfg = SdeConfig {
            eta: 0.7,
            eps_floor: 1.0,
            steps: 100,
        };
        let x = s(0.4);
        let (a, _) = sde_step(&c, &x, 0.0, &x, &cfg, &mut Rng::new(1)).unwrap();
        let xi = Rng::new(1).normal();
        let expected = 0.4 + 2.0 * 0.01 + 0.7 * 0.1 * xi;
        assert!((a.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn ensemble_examples() {
        let st = ensemble_stats(&[s(0.0), s(2.0)]).unwrap();
        assert_eq!(st.variance.item(), 2.0);
        let same = ensemble_stats(&[s(1.5), s(1.5), s(1.5)]).unwrap();
        assert_eq!(same.mean_variance, 0.0);
        assert!(matches!(ensemble_stats(&[s(1.0)]), Err(Error::Contract(_))));
    }
}
