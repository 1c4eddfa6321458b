use super::spectral::{is_nyquist, mode, wavenumber, Fft2, C64};
use super::{GridSpec, System, SystemParams, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Time integrator used for the heat equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatScheme {
    /// Exact per-mode exponential decay.
    Spectral,
    /// Explicit five-point stencil; requires `nu * dt / dx^2 <= 0.25`.
    FiniteDifference,
}

const BLOWUP: f64 = 1e3;

fn planes(state: &Tensor, n: usize) -> Vec<Vec<f64>> {
    state.data().chunks(n * n).map(<[f64]>::to_vec).collect()
}

fn from_planes(planes: &[Vec<f64>], grid: &GridSpec) -> Tensor {
    Tensor::new(grid.shape().to_vec(), planes.concat()).expect("grid shape")
}

/// Multiply every Fourier mode of every channel by `factor(kx, ky)` once per step.
fn spectral_evolve(
    grid: &GridSpec,
    ic: &Tensor,
    steps: usize,
    factor: impl Fn(usize, usize) -> C64,
) -> Result<Vec<Tensor>> {
    let n = grid.width;
    let mut fft = Fft2::new(n);
    let mut specs: Vec<Vec<C64>> = planes(ic, n).iter().map(|p| fft.forward_real(p)).collect();
    let mult: Vec<C64> = (0..n * n).map(|i| factor(i % n, i / n)).collect();
    let mut states = vec![ic.clone()];
    for _ in 0..steps {
        for s in &mut specs {
            s.iter_mut().zip(&mult).for_each(|(v, m)| *v *= m);
        }
        let p: Vec<Vec<f64>> = specs.iter().map(|s| fft.inverse_real(s)).collect();
        states.push(from_planes(&p, grid));
    }
    Ok(states)
}

pub fn solve_heat(
    grid: &GridSpec,
    ic: &Tensor,
    diffusivity: f64,
    steps: usize,
    dt: f64,
    scheme: HeatScheme,
) -> Result<Trajectory> {
    grid.check(ic)?;
    let n = grid.width;
    let states = match scheme {
        HeatScheme::Spectral => spectral_evolve(grid, ic, steps, |ix, iy| {
            let (kx, ky) = (wavenumber(ix, n, grid.domain_length), wavenumber(iy, n, grid.domain_length));
            C64::new((-diffusivity * (kx * kx + ky * ky) * dt).exp(), 0.0)
        })?,
        HeatScheme::FiniteDifference => {
            let dx = grid.dx();
            let r = diffusivity * dt / (dx * dx);
            if r > 0.25 {
                return Err(Error::config(format!("explicit heat step violates CFL: nu*dt/dx^2 = {r:.4} > 0.25")));
            }
            let mut cur = planes(ic, n);
            let mut states = vec![ic.clone()];
            for _ in 0..steps {
                for p in &mut cur {
                    let old = p.clone();
                    for y in 0..n {
                        for x in 0..n {
                            let at = |yy: usize, xx: usize| old[(yy % n) * n + xx % n];
                            let lap = at(y + 1, x) + at(y + n - 1, x) + at(y, x + 1) + at(y, x + n - 1) - 4.0 * at(y, x);
                            p[y * n + x] = old[y * n + x] + r * lap;
                        }
                    }
                }
                states.push(from_planes(&cur, grid));
            }
            states
        }
    };
    Ok(Trajectory {
        system: System::Heat,
        params: SystemParams {
            diffusivity,
            velocity: (0.0, 0.0),
        },
        dt,
        grid: *grid,
        states,
    })
}

/// Exact periodic translation by `velocity * dt` per step. The Nyquist row and
/// column are held fixed so the update stays real and norm-preserving.
pub fn solve_advection(grid: &GridSpec, ic: &Tensor, velocity: (f64, f64), steps: usize, dt: f64) -> Result<Trajectory> {
    grid.check(ic)?;
    let n = grid.width;
    let l = grid.domain_length;
    let states = spectral_evolve(grid, ic, steps, |ix, iy| {
        let kx = if is_nyquist(ix, n) { 0.0 } else { wavenumber(ix, n, l) };
        let ky = if is_nyquist(iy, n) { 0.0 } else { wavenumber(iy, n, l) };
        let phase = -(kx * velocity.0 + ky * velocity.1) * dt;
        C64::new(phase.cos(), phase.sin())
    })?;
    Ok(Trajectory {
        system: System::Advection,
        params: SystemParams {
            diffusivity: 0.0,
            velocity,
        },
        dt,
        grid: *grid,
        states,
    })
}

struct BurgersRhs {
    n: usize,
    nu: f64,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    mask: Vec<f64>,
    fft: Fft2,
}

impl BurgersRhs {
    fn new(grid: &GridSpec, nu: f64) -> Self {
        let n = grid.width;
        let l = grid.domain_length;
        let cut = (n / 3) as i64;
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        let mut k2 = vec![0.0; n * n];
        let mut mask = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                let (wx, wy) = (wavenumber(ix, n, l), wavenumber(iy, n, l));
                kx[i] = if is_nyquist(ix, n) { 0.0 } else { wx };
                ky[i] = if is_nyquist(iy, n) { 0.0 } else { wy };
                k2[i] = wx * wx + wy * wy;
                mask[i] = if mode(ix, n).abs() <= cut && mode(iy, n).abs() <= cut { 1.0 } else { 0.0 };
            }
        }
        BurgersRhs {
            n,
            nu,
            kx,
            ky,
            k2,
            mask,
            fft: Fft2::new(n),
        }
    }

    fn deriv(&mut self, s: &[C64], k: &[f64]) -> Vec<f64> {
        let d: Vec<C64> = s.iter().zip(k).map(|(v, &kk)| v * C64::new(0.0, kk)).collect();
        self.fft.inverse_real(&d)
    }

    /// Scalar form `u_t = -u (u_x + u_y) + nu lap u`, evaluated conservatively as
    /// `-(1/2)(d_x + d_y)(u^2)`; vector form `u_t = -(u . grad) u + nu lap u`.
    fn eval(&mut self, state: &[Vec<C64>]) -> Vec<Vec<C64>> {
        let nn = self.n * self.n;
        let phys: Vec<Vec<f64>> = state.iter().map(|s| self.fft.inverse_real(s)).collect();
        let nonlinear: Vec<Vec<f64>> = if state.len() == 1 {
            vec![phys[0].iter().map(|u| u * u).collect()]
        } else {
            let (kx, ky) = (self.kx.clone(), self.ky.clone());
            (0..2)
                .map(|c| {
                    let dx = self.deriv(&state[c], &kx);
                    let dy = self.deriv(&state[c], &ky);
                    (0..nn).map(|i| phys[0][i] * dx[i] + phys[1][i] * dy[i]).collect()
                })
                .collect()
        };
        let scalar = state.len() == 1;
        nonlinear
            .iter()
            .zip(state)
            .map(|(w, s)| {
                let wh = self.fft.forward_real(w);
                (0..nn)
                    .map(|i| {
                        let adv = if scalar {
                            wh[i] * C64::new(0.0, 0.5 * (self.kx[i] + self.ky[i]))
                        } else {
                            wh[i]
                        };
                        -adv * self.mask[i] - s[i] * (self.nu * self.k2[i])
                    })
                    .collect()
            })
            .collect()
    }
}

fn axpy(base: &[Vec<C64>], c: f64, d: &[Vec<C64>]) -> Vec<Vec<C64>> {
    base.iter()
        .zip(d)
        .map(|(b, dd)| b.iter().zip(dd).map(|(x, y)| x + y * c).collect())
        .collect()
}

pub fn solve_burgers(grid: &GridSpec, ic: &Tensor, diffusivity: f64, steps: usize, dt: f64) -> Result<Trajectory> {
    solve_burgers_refined(grid, ic, diffusivity, steps, dt, 1)
}

/// Burgers with the CFL-chosen substep divided by `refine` (used for convergence studies).
pub fn solve_burgers_refined(
    grid: &GridSpec,
    ic: &Tensor,
    diffusivity: f64,
    steps: usize,
    dt: f64,
    refine: usize,
) -> Result<Trajectory> {
    grid.check(ic)?;
    if !(diffusivity > 0.0) {
        return Err(Error::config("burgers requires diffusivity > 0"));
    }
    let n = grid.width;
    let dx = grid.dx();
    let mut rhs = BurgersRhs::new(grid, diffusivity);
    let mut state: Vec<Vec<C64>> = planes(ic, n)
        .iter()
        .map(|p| {
            let mut s = rhs.fft.forward_real(p);
            s.iter_mut().zip(&rhs.mask).for_each(|(v, m)| *v *= m);
            s
        })
        .collect();
    let to_tensor = |rhs: &mut BurgersRhs, state: &[Vec<C64>]| {
        let p: Vec<Vec<f64>> = state.iter().map(|s| rhs.fft.inverse_real(s)).collect();
        from_planes(&p, grid)
    };
    let first = to_tensor(&mut rhs, &state);
    let umax0 = first.max_abs().max(1e-12);
    let kmax2 = rhs.k2.iter().zip(&rhs.mask).map(|(k, m)| k * m).fold(0.0, f64::max);
    let dt_cap = (0.5 * dx / umax0).min(2.5 / (diffusivity * kmax2).max(1e-300));
    let mut sub = (dt / dt_cap).ceil().max(1.0) as usize * refine.max(1);
    let mut states = vec![first];
    for step in 0..steps {
        let umax = states.last().expect("non-empty").max_abs();
        if umax > BLOWUP || !umax.is_finite() {
            return Err(Error::Simulation { step, max_abs: umax });
        }
        while umax * (dt / sub as f64) / dx > 0.5 {
            sub *= 2;
        }
        let h = dt / sub as f64;
        for _ in 0..sub {
            let k1 = rhs.eval(&state);
            let k2 = rhs.eval(&axpy(&state, 0.5 * h, &k1));
            let k3 = rhs.eval(&axpy(&state, 0.5 * h, &k2));
            let k4 = rhs.eval(&axpy(&state, h, &k3));
            for c in 0..state.len() {
                for i in 0..n * n {
                    state[c][i] += (k1[c][i] + k2[c][i] * 2.0 + k3[c][i] * 2.0 + k4[c][i]) * (h / 6.0);
                }
            }
        }
        let t = to_tensor(&mut rhs, &state);
        let m = t.max_abs();
        if m > BLOWUP || !m.is_finite() {
            return Err(Error::Simulation { step: step + 1, max_abs: m });
        }
        states.push(t);
    }
    Ok(Trajectory {
        system: System::Burgers,
        params: SystemParams {
            diffusivity,
            velocity: (0.0, 0.0),
        },
        dt,
        grid: *grid,
        states,
    })
}
