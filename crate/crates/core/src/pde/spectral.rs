//! 2D FFT helpers on square periodic grids.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub(crate) type C64 = Complex<f64>;

pub(crate) struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<C64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            scratch: vec![C64::default(); n],
        }
    }

    fn run(&mut self, data: &mut [C64], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        for row in data.chunks_mut(n) {
            plan.process(row);
        }
        for col in 0..n {
            for r in 0..n {
                self.scratch[r] = data[r * n + col];
            }
            plan.process(&mut self.scratch);
            for r in 0..n {
                data[r * n + col] = self.scratch[r];
            }
        }
        if inverse {
            let norm = 1.0 / (n * n) as f64;
            data.iter_mut().for_each(|v| *v *= norm);
        }
    }

    pub fn forward_real(&mut self, plane: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = plane.iter().map(|&v| C64::new(v, 0.0)).collect();
        self.run(&mut buf, false);
        buf
    }

    pub fn inverse_real(&mut self, spec: &[C64]) -> Vec<f64> {
        let mut buf = spec.to_vec();
        self.run(&mut buf, true);
        buf.into_iter().map(|c| c.re).collect()
    }
}

/// Signed integer mode index for FFT position `i` of an `n`-point transform.
pub(crate) fn mode(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

pub(crate) fn is_nyquist(i: usize, n: usize) -> bool {
    n % 2 == 0 && i == n / 2
}

/// Physical wavenumber `2 pi m / L` for FFT position `i`.
pub(crate) fn wavenumber(i: usize, n: usize, length: f64) -> f64 {
    2.0 * PI * mode(i, n) as f64 / length
}
