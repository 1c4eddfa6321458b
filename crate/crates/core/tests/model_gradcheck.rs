//! Parameter gradients of the three training losses against central differences.

mod common;

use flowmarch::kernel::{bridge_with_noise, fm_loss};
use flowmarch::rng::Rng;

const TOL: f64 = 1e-4;

#[test]
fn tiny_models_stay_small() {
    assert!(common::tiny_flow(1).param_count() <= 5000);
    assert!(common::tiny_vae(1).params.count() <= 5000);
}

#[test]
fn fm_loss_parameter_gradients() {
    let e = common::fm_loss_gradcheck();
    assert!(e < TOL, "relative error {e:e}");
}

#[test]
fn cfm_loss_parameter_gradients() {
    let e = common::cfm_loss_gradcheck();
    assert!(e < TOL, "relative error {e:e}");
}

#[test]
fn vae_loss_parameter_gradients() {
    let e = common::vae_loss_gradcheck();
    assert!(e < TOL, "relative error {e:e}");
}

/// d/dpred of the tensor loss is `(1 - t)((1 - t) pred - (x1 - x_t)) / n`.
#[test]
fn fm_loss_prediction_gradient_closed_form() {
    let mut rng = Rng::new(5);
    let x0 = rng.normal_tensor(&[3, 4]);
    let x1 = rng.normal_tensor(&[3, 4]);
    let z = rng.normal_tensor(&[3, 4]);
    let s = bridge_with_noise(&x0, &x1, 0.35, 0.4, z).unwrap();
    let pred = rng.normal_tensor(&[3, 4]);
    let w = 1.0 - s.t;
    let n = pred.numel() as f64;
    for j in 0..pred.numel() {
        let closed = w * (w * pred.data()[j] - (s.x1.data()[j] - s.x_t.data()[j])) / n;
        let (mut p, mut m) = (pred.clone(), pred.clone());
        p.data_mut()[j] += common::FD_STEP;
        m.data_mut()[j] -= common::FD_STEP;
        let fd = (fm_loss(&p, &s).unwrap() - fm_loss(&m, &s).unwrap()) / (2.0 * common::FD_STEP);
        assert!((closed - fd).abs() <= 1e-8 * closed.abs().max(1e-3), "{j}: {closed} vs {fd}");
    }
}
