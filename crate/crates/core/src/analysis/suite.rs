//! Self-contained numerical checks run by `flowmarch verify`.

use serde::{Deserialize, Serialize};

use super::{continuity_check, fm_bound, fm_limit, operator_bound, posterior_mean_oracle, BinGrid, FmErrorModel, OperatorErrorModel, ToyJoint};
use crate::config::AnalysisConfig;
use crate::error::Result;
use crate::kernel::{bridge_with_noise, fm_loss, score_velocity_decomposition, velocity_target};
use crate::model::efficiency_ratio;
use crate::rng::Rng;
use crate::sampler::{integrate_ode, integrate_sde, OdeConfig, SdeConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Measured quantity compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn below(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Check {
            name: name.into(),
            pass: value < tolerance,
            value,
            tolerance,
            detail,
        }
    }
}

/// Largest disagreement between the equivalent kernel forms over `draws` scalar samples.
pub fn kernel_identity_errors(draws: usize, seed: u64) -> Result<[f64; 3]> {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..draws {
        let x0 = Tensor::scalar(2.0 * rng.normal());
        let x1 = Tensor::scalar(2.0 * rng.normal());
        let z = Tensor::scalar(rng.normal());
        let t = 0.99 * rng.uniform();
        let k = 0.99 * rng.uniform();
        let s = bridge_with_noise(&x0, &x1, t, k, z)?;
        let u = velocity_target(&s)?.u.item();
        worst[0] = worst[0].max((s.x_t.item() - s.residual_form().item()).abs());
        worst[1] = worst[1].max((u - s.velocity_closed_form().item()).abs());
        worst[2] = worst[2].max((u - score_velocity_decomposition(&s)?.item()).abs());
    }
    Ok(worst)
}

/// Endpoint and degenerate cases of the bridge; true when all hold exactly.
pub fn limit_laws(seed: u64) -> Result<bool> {
    let mut rng = Rng::new(seed);
    let x0 = rng.normal_tensor(&[8]);
    let x1 = rng.normal_tensor(&[8]);
    let (za, zb) = (rng.normal_tensor(&[8]), rng.normal_tensor(&[8]));
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut ok = true;
    for t in [0.0, 0.3, 0.77] {
        let a = bridge_with_noise(&x0, &x1, t, 1.0, za.clone())?;
        let b = bridge_with_noise(&x0, &x1, t, 1.0, zb.clone())?;
        ok &= bits(&a.x_t) == bits(&b.x_t);
    }
    for k in [0.0, 0.4, 1.0] {
        let end = bridge_with_noise(&x0, &x1, 1.0, k, za.clone())?;
        ok &= end.x_t == x1;
        ok &= fm_loss(&rng.normal_tensor(&[8]), &end)?.is_finite();
    }
    ok &= bridge_with_noise(&x0, &x1, 0.0, 0.0, za.clone())?.x_t == za;
    Ok(ok)
}

/// Closed-form field carrying N(0, 1) to N(m, s^2) along `t m + sigma(t) x0`.
fn gaussian_transport(m: f64, s: f64) -> impl Fn(&Tensor, f64) -> Result<Tensor> {
    move |x: &Tensor, t: f64| {
        let sig = (t * t * s * s + (1.0 - t) * (1.0 - t)).sqrt();
        let dsig = (t * s * s - (1.0 - t)) / sig;
        Ok(x.map(|v| m + dsig / sig * (v - t * m)))
    }
}

/// Log-log slope of the Euler terminal error against the step count.
pub fn euler_order_slope(steps: &[usize]) -> Result<(Vec<f64>, f64)> {
    let (m, s) = (0.5, 2.0);
    let field = gaussian_transport(m, s);
    let x0 = Rng::new(17).normal_tensor(&[32]);
    let exact = x0.map(|v| m + s * v);
    let mut errs = Vec::new();
    for &n in steps {
        let end = integrate_ode(&field, &x0, &OdeConfig { steps: n })?;
        errs.push(end.sub(&exact)?.data().iter().map(|d| d * d).sum::<f64>().sqrt());
    }
    let xs: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok((errs, cov / var))
}

/// Whether an `eta = 0` SDE path reproduces the ODE path bit for bit.
pub fn sde_degenerates_to_ode(seed: u64) -> Result<bool> {
    let field = |x: &Tensor, t: f64| Ok(x.map(|v| (v * (1.0 + t)).sin() - 0.3 * v));
    let x0 = Rng::new(seed).normal_tensor(&[4, 4]);
    let ode = integrate_ode(&field, &x0, &OdeConfig { steps: 100 })?;
    let cfg = SdeConfig {
        eta: 0.0,
        eps_floor: 1.0,
        steps: 100,
    };
    let sde = integrate_sde(&field, &x0, &x0, &cfg, &mut Rng::new(seed + 1))?;
    Ok(ode.data().iter().zip(sde.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
}

/// Every check, in a fixed order.
pub fn verify_suite(cfg: &AnalysisConfig) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let ids = kernel_identity_errors(10_000, cfg.seed)?;
    let names = ["kernel.location_scale_vs_residual", "kernel.velocity_forms", "kernel.score_decomposition"];
    for (n, e) in names.iter().zip(ids) {
        out.push(Check::below(n, e, 1e-12, "max abs diff over 1e4 scalar draws".into()));
    }
    let laws = limit_laws(cfg.seed)?;
    out.push(Check {
        name: "kernel.limit_laws".into(),
        pass: laws,
        value: if laws { 0.0 } else { 1.0 },
        tolerance: 0.0,
        detail: "k=1 noise-free, t=1 target, k=0 t=0 noise, finite loss at t=1".into(),
    });
    let op = operator_bound(
        &OperatorErrorModel {
            lipschitz: 2.0,
            rho: 0.1,
            d_max: 1.0,
            delta0: 0.0,
        },
        3,
    )?;
    out.push(Check::below("bounds.operator_hand_value", (op - 0.7).abs(), 1e-12, format!("bound {op}")));
    let fm = FmErrorModel {
        lipschitz: 0.5,
        rho: 0.1,
        d_max: 1.0,
        delta0: 0.0,
        eps_time: None,
    };
    let lim = fm_limit(&fm)?;
    let expected = 0.1 / (0.5 * (std::f64::consts::E - 1.0));
    out.push(Check::below("bounds.fm_limit", (lim - expected).abs(), 1e-12, format!("limit {lim}")));
    let at60 = fm_bound(&fm, 60)?;
    out.push(Check::below("bounds.fm_convergence", (lim - at60).abs(), 1e-10, format!("n=60 bound {at60}")));
    let r = efficiency_ratio(16, &[8, 4, 2, 1]);
    out.push(Check {
        name: "pyramid.efficiency_ratio".into(),
        pass: (14.99..=15.01).contains(&r),
        value: r,
        tolerance: 0.01,
        detail: "token side 16, factors (8,4,2,1)".into(),
    });
    let (errs, slope) = euler_order_slope(&[50, 100, 200, 400])?;
    out.push(Check {
        name: "sampler.euler_order".into(),
        pass: (-1.3..=-0.7).contains(&slope),
        value: slope,
        tolerance: 0.3,
        detail: format!("terminal errors {errs:?}"),
    });
    let deg = sde_degenerates_to_ode(cfg.seed)?;
    out.push(Check {
        name: "sampler.eta_zero_is_ode".into(),
        pass: deg,
        value: if deg { 0.0 } else { 1.0 },
        tolerance: 0.0,
        detail: "bitwise".into(),
    });
    let joint = ToyJoint::single(0.0, 1.0);
    let oracle = posterior_mean_oracle(&joint, 0.0, &BinGrid::default(), cfg.oracle_samples, cfg.samples_per_bin, cfg.seed)?;
    out.push(Check::below(
        "oracle.single_pair_bins",
        oracle.max_sigma,
        3.0,
        format!(
            "{} bins checked, {} sparse, {} empty, estimator gap {:e}",
            oracle.checked_bins, oracle.sparse_bins, oracle.empty_bins, oracle.estimator_gap
        ),
    ));
    out.push(Check {
        name: "oracle.estimators_identical".into(),
        pass: oracle.estimator_gap == 0.0,
        value: oracle.estimator_gap,
        tolerance: 0.0,
        detail: "bin mean vs per-bin least squares".into(),
    });
    let cont = continuity_check(&joint, 0.0, &[0.1, 0.3, 0.5, 0.7], cfg.continuity_samples, cfg.seed, None)?;
    out.push(Check::below(
        "oracle.continuity",
        cont.max_deviation_sigmas,
        5.0,
        format!("{} rows, deviations in MC standard errors", cont.rows.len()),
    ));
    Ok(out)
}
