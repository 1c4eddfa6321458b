//! Helpers shared by integration tests.
#![allow(dead_code)]

use flowmarch::kernel::bridge_with_noise;
use flowmarch::model::{cfm_loss, pyramid_down, FlowModel, FmtArch, Forcing, PyramidSpec, Sampler01, WindowDraws};
use flowmarch::params::{Grads, ParamStore};
use flowmarch::rng::Rng;
use flowmarch::tensor::{Graph, Tensor};
use flowmarch::vae::{Vae, VaeArch};

pub const FD_STEP: f64 = 1e-5;

/// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` between
/// analytic and central-difference gradients of `loss` over every parameter.
pub fn param_gradcheck<F>(store: &ParamStore, loss: F) -> f64
where
    F: Fn(&ParamStore) -> (f64, Grads),
{
    let (_, analytic) = loss(store);
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.value(id).numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = store.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let fp = loss(&probe).0;
            probe.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let fm = loss(&probe).0;
            probe.value_mut(id).data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * FD_STEP);
        }
        let a = analytic.get(id);
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

pub fn tiny_flow(seed: u64) -> FlowModel {
    let arch = FmtArch {
        latent_channels: 2,
        width: 8,
        blocks: 2,
        hidden: 8,
        time_dim: 8,
    };
    let mut rng = Rng::new(seed);
    let mut m = FlowModel::new(arch, &mut rng).unwrap();
    // Zero-initialized heads would leave most gradients exactly zero.
    m.params.jitter(&mut rng, 0.2);
    m
}

pub fn tiny_vae(seed: u64) -> Vae {
    let arch = VaeArch {
        channels: 1,
        latent_channels: 2,
        width: 4,
        factor: 4,
    };
    let mut rng = Rng::new(seed);
    let mut v = Vae::new(arch, &mut rng).unwrap();
    v.params.jitter(&mut rng, 0.05);
    v
}

/// Single-term preconditioned loss of the tiny model on a batch of 2, 4x4 latents.
pub fn fm_loss_gradcheck() -> f64 {
    let base = tiny_flow(11);
    let mut rng = Rng::new(12);
    let (ts, ks) = ([0.3, 0.8], [0.2, 0.6]);
    let samples: Vec<_> = (0..2)
        .map(|i| {
            let x0 = rng.normal_tensor(&[2, 4, 4]);
            let x1 = rng.normal_tensor(&[2, 4, 4]);
            let z = rng.normal_tensor(&[2, 4, 4]);
            bridge_with_noise(&x0, &x1, ts[i], ks[i], z).unwrap()
        })
        .collect();
    let xt = Tensor::stack(&samples.iter().map(|s| s.x_t.clone()).collect::<Vec<_>>()).unwrap();
    let resid = Tensor::stack(&samples.iter().map(|s| s.preconditioned_target()).collect::<Vec<_>>()).unwrap();
    param_gradcheck(&base.params, |store| {
        let mut m = base.clone();
        m.params = store.clone();
        let mut g = Graph::new();
        let h = m.initial_filter(&mut g, 2).unwrap();
        let x = g.input(xt.clone());
        let pred = m.velocity(&mut g, x, &ts, h).unwrap();
        let scaled = g.mul_rows(pred, &[1.0 - ts[0], 1.0 - ts[1]]).unwrap();
        let r = g.input(resid.clone());
        let d = g.sub(scaled, r).unwrap();
        let sq = g.square(d).unwrap();
        let mean = g.mean(sq).unwrap();
        let loss = g.scale(mean, 0.5).unwrap();
        // The graph value is the batch average of the tensor-level loss.
        let p = g.value(pred);
        let direct: f64 = (0..2)
            .map(|i| flowmarch::kernel::fm_loss(&p.index(i), &samples[i]).unwrap())
            .sum::<f64>()
            / 2.0;
        let value = g.value(loss).item();
        assert!((value - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        g.backward(loss).unwrap();
        (value, g.param_grads(store))
    })
}

/// Three-term window objective with pyramid (2,1,1,1).
pub fn cfm_loss_gradcheck() -> f64 {
    let base = tiny_flow(21);
    let mut rng = Rng::new(22);
    let spec = PyramidSpec { factors: [2, 1, 1, 1] };
    let states: Vec<Tensor> = (0..4).map(|_| rng.normal_tensor(&[2, 2, 4, 4])).collect();
    let levels = pyramid_down(&states, &spec).unwrap();
    let shapes: Vec<Vec<usize>> = levels[1..].iter().map(|l| l.shape().to_vec()).collect();
    let draws = WindowDraws::sample(&mut rng, &shapes, Sampler01::Uniform, Sampler01::Uniform);
    param_gradcheck(&base.params, |store| {
        let mut m = base.clone();
        m.params = store.clone();
        let mut g = Graph::new();
        let out = cfm_loss(&m, &mut g, &levels, &spec, &draws).unwrap();
        let value = g.value(out.total).item();
        g.backward(out.total).unwrap();
        (value, g.param_grads(store))
    })
}

/// VAE loss on a batch of 2 8x8 fields with a fixed reparameterization draw.
pub fn vae_loss_gradcheck() -> f64 {
    let base = tiny_vae(31);
    let mut rng = Rng::new(32);
    let x = rng.normal_tensor(&[2, 1, 8, 8]);
    let eps = rng.normal_tensor(&[2, 2, 2, 2]);
    param_gradcheck(&base.params, |store| {
        let mut v = base.clone();
        v.params = store.clone();
        let mut g = Graph::new();
        let out = v.loss_graph(&mut g, &x, &eps, 0.5).unwrap();
        let value = g.value(out.total).item();
        g.backward(out.total).unwrap();
        (value, g.param_grads(store))
    })
}

/// Exact probability-flow field carrying N(0, 1) to N(m, s^2) along
/// `x_t = t m + sigma(t) x_0`, `sigma(t) = sqrt(t^2 s^2 + (1 - t)^2)`.
pub fn gaussian_transport(m: f64, s: f64) -> impl Fn(&Tensor, f64) -> flowmarch::Result<Tensor> {
    move |x: &Tensor, t: f64| {
        let sig = (t * t * s * s + (1.0 - t) * (1.0 - t)).sqrt();
        let dsig = (t * s * s - (1.0 - t)) / sig;
        Ok(x.map(|v| m + dsig / sig * (v - t * m)))
    }
}

/// Terminal Euler errors at each step count and the least-squares slope of log error against log N.
pub fn euler_order(steps: &[usize]) -> (Vec<f64>, f64) {
    use flowmarch::sampler::{integrate_ode, OdeConfig};
    let (m, s) = (0.5, 2.0);
    let field = gaussian_transport(m, s);
    let x0 = Rng::new(7).normal_tensor(&[64]);
    let exact = x0.map(|v| m + s * v);
    let errs: Vec<f64> = steps
        .iter()
        .map(|&n| {
            let end = integrate_ode(&field, &x0, &OdeConfig { steps: n }).unwrap();
            end.sub(&exact).unwrap().data().iter().map(|d| d * d).sum::<f64>().sqrt()
        })
        .collect();
    let xs: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (errs, cov / var)
}

/// Whether an eta = 0 SDE path equals the ODE path bit for bit on a nonlinear field.
pub fn sde_eta_zero_is_ode() -> bool {
    use flowmarch::sampler::{integrate_ode, integrate_sde, OdeConfig, SdeConfig};
    let field = |x: &Tensor, t: f64| Ok(x.map(|v| (v * (1.0 + t)).sin() - 0.3 * v));
    let x0 = Rng::new(8).normal_tensor(&[3, 5]);
    let ode = integrate_ode(&field, &x0, &OdeConfig { steps: 100 }).unwrap();
    let cfg = SdeConfig {
        eta: 0.0,
        eps_floor: 1.0,
        steps: 100,
    };
    let sde = integrate_sde(&field, &x0, &x0, &cfg, &mut Rng::new(9)).unwrap();
    ode.data().iter().zip(sde.data()).all(|(a, b)| a.to_bits() == b.to_bits())
}
