use super::spectral::{is_nyquist, mode, Fft2};
use super::GridSpec;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gaussian random field with power `(1 + |m|)^(-2 decay)` over integer modes `m`,
/// shifted and scaled to exactly zero mean and unit standard deviation per channel.
pub fn make_initial_condition(rng: &mut Rng, grid: &GridSpec, spectrum_decay: f64) -> Result<Tensor> {
    if !(spectrum_decay >= 0.0) {
        return Err(Error::config(format!("spectrum_decay must be >= 0, got {spectrum_decay}")));
    }
    let n = grid.width;
    let mut fft = Fft2::new(n);
    let mut data = Vec::with_capacity(grid.channels * n * n);
    for _ in 0..grid.channels {
        let noise: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let mut spec = fft.forward_real(&noise);
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                if (ix == 0 && iy == 0) || is_nyquist(ix, n) || is_nyquist(iy, n) {
                    spec[i] = Default::default();
                    continue;
                }
                let (mx, my) = (mode(ix, n) as f64, mode(iy, n) as f64);
                spec[i] *= (1.0 + (mx * mx + my * my).sqrt()).powf(-spectrum_decay);
            }
        }
        let mut plane = fft.inverse_real(&spec);
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        plane.iter_mut().for_each(|v| *v -= mean);
        let std = (plane.iter().map(|v| v * v).sum::<f64>() / plane.len() as f64).sqrt();
        plane.iter_mut().for_each(|v| *v /= std);
        data.extend(plane);
    }
    Tensor::new(grid.shape().to_vec(), data)
}
