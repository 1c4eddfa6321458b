//! Scalar toy joints: the velocity regression target's conditional mean and
//! the continuity equation it satisfies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A discrete joint over scalar `(x0, x1)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyJoint {
    /// `(x0, x1, weight)`; weights need not be normalized.
    pub atoms: Vec<(f64, f64, f64)>,
}

pub const MAX_ATOMS: usize = 16;

impl ToyJoint {
    pub fn single(x0: f64, x1: f64) -> Self {
        ToyJoint {
            atoms: vec![(x0, x1, 1.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() || self.atoms.len() > MAX_ATOMS {
            return Err(Error::contract(format!("toy joint needs 1..={MAX_ATOMS} atoms")));
        }
        if self.atoms.iter().any(|a| !(a.2 > 0.0) || !a.0.is_finite() || !a.1.is_finite()) {
            return Err(Error::contract("toy joint atoms need finite values and positive weights"));
        }
        Ok(())
    }

    fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.2).sum()
    }

    fn pick(&self, rng: &mut Rng) -> (f64, f64) {
        let mut r = rng.uniform() * self.total_weight();
        for a in &self.atoms {
            if r < a.2 {
                return (a.0, a.1);
            }
            r -= a.2;
        }
        let last = self.atoms[self.atoms.len() - 1];
        (last.0, last.1)
    }

    /// One bridge draw `(x_t, u)` at time `t`.
    pub fn draw(&self, k: f64, t: f64, rng: &mut Rng) -> (f64, f64) {
        let (x0, x1) = self.pick(rng);
        let z = rng.normal();
        let x = t * x1 + k * (1.0 - t) * x0 + (1.0 - t) * (1.0 - k) * z;
        (x, (x1 - x) / (1.0 - t))
    }

    /// Closed-form conditional mean of the velocity target given `x_t = x`.
    ///
    /// A mixture of the per-atom quotients weighted by their Gaussian
    /// likelihoods; undefined at `k = 1` where the kernel has no density.
    pub fn posterior_velocity(&self, k: f64, x: f64, t: f64) -> Result<f64> {
        let sigma = (1.0 - t) * (1.0 - k);
        if sigma <= 0.0 {
            return Err(Error::DegenerateKernel { t, k });
        }
        // Log-sum-exp over atoms for stability far in the tails.
        let logs: Vec<f64> = self
            .atoms
            .iter()
            .map(|a| {
                let mu = t * a.1 + k * (1.0 - t) * a.0;
                a.2.ln() - 0.5 * ((x - mu) / sigma).powi(2)
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (a, l) in self.atoms.iter().zip(&logs) {
            let w = (l - m).exp();
            num += w * (a.1 - x) / (1.0 - t);
            den += w;
        }
        Ok(num / den)
    }

    /// Exact average of the conditional mean over a `(x, t)` cell, `t` uniform in the cell.
    ///
    /// The `x` integral is closed form; `t` uses composite Gauss-Legendre.
    pub fn bin_average(&self, k: f64, x: (f64, f64), t: (f64, f64)) -> Result<f64> {
        if k >= 1.0 {
            return Err(Error::DegenerateKernel { t: t.0, k });
        }
        let (mut num, mut den) = (0.0, 0.0);
        let pieces = 32;
        let h = (t.1 - t.0) / pieces as f64;
        for p in 0..pieces {
            let mid = t.0 + (p as f64 + 0.5) * h;
            for (node, weight) in GAUSS_LEGENDRE_8 {
                let tt = mid + 0.5 * h * node;
                let sigma = (1.0 - tt) * (1.0 - k);
                for a in &self.atoms {
                    let mu = tt * a.1 + k * (1.0 - tt) * a.0;
                    let (za, zb) = ((x.0 - mu) / sigma, (x.1 - mu) / sigma);
                    let mass = std_normal_cdf(zb) - std_normal_cdf(za);
                    let first = mu * mass - sigma * (std_normal_pdf(zb) - std_normal_pdf(za));
                    let w = a.2 * weight * 0.5 * h;
                    num += w * (a.1 * mass - first) / (1.0 - tt);
                    den += w * mass;
                }
            }
        }
        if den <= 0.0 {
            return Err(Error::UndefinedMetric("bin with zero probability"));
        }
        Ok(num / den)
    }
}

const GAUSS_LEGENDRE_8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
];

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Regular bins over `x_t` and `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub x_bins: usize,
    pub x_range: (f64, f64),
    pub t_bins: usize,
    pub t_range: (f64, f64),
}

impl Default for BinGrid {
    fn default() -> Self {
        BinGrid {
            x_bins: 16,
            x_range: (-3.0, 3.0),
            t_bins: 8,
            t_range: (0.0, 0.9),
        }
    }
}

impl BinGrid {
    fn x_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.x_range.1 - self.x_range.0) / self.x_bins as f64;
        (self.x_range.0 + i as f64 * w, self.x_range.0 + (i + 1) as f64 * w)
    }

    fn t_edges(&self, j: usize) -> (f64, f64) {
        let w = (self.t_range.1 - self.t_range.0) / self.t_bins as f64;
        (self.t_range.0 + j as f64 * w, self.t_range.0 + (j + 1) as f64 * w)
    }

    /// Flat index `t_bin * x_bins + x_bin`, or `None` outside the grid.
    pub fn locate(&self, x: f64, t: f64) -> Option<usize> {
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let ft = (t - self.t_range.0) / (self.t_range.1 - self.t_range.0);
        if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&ft) {
            return None;
        }
        let i = ((fx * self.x_bins as f64) as usize).min(self.x_bins - 1);
        let j = ((ft * self.t_bins as f64) as usize).min(self.t_bins - 1);
        Some(j * self.x_bins + i)
    }

    pub fn len(&self) -> usize {
        self.x_bins * self.t_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
    pub count: usize,
    /// Sample mean of the target in the bin.
    pub mean: f64,
    /// Per-bin constant minimizing the empirical squared loss.
    pub l2_minimizer: f64,
    /// Standard error of `mean`.
    pub std_err: f64,
    /// Exact bin average of the conditional mean, when the kernel has a density.
    pub analytic: Option<f64>,
    /// Closed-form field at the bin's sample centroid.
    pub analytic_at_centroid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub k: f64,
    pub samples: usize,
    pub seed: u64,
    pub bins: Vec<BinReport>,
    pub empty_bins: usize,
    /// Populated bins below `min_count`, left out of the analytic comparison.
    pub sparse_bins: usize,
    pub min_count: usize,
    /// Max |mean - l2_minimizer| over populated bins.
    pub estimator_gap: f64,
    /// Max |mean - analytic| / std_err over bins with at least `min_count` samples.
    pub max_sigma: f64,
    pub checked_bins: usize,
}

/// Solve the one-hot least-squares problem through its normal equations.
///
/// With indicator features the Gram matrix is diagonal (the counts) and the
/// right-hand side holds per-bin target sums.
fn per_bin_least_squares(bins: &[Option<usize>], u: &[f64], n_bins: usize) -> Vec<Option<f64>> {
    let mut gram = vec![0.0; n_bins];
    let mut rhs = vec![0.0; n_bins];
    for (b, y) in bins.iter().zip(u) {
        if let Some(b) = *b {
            gram[b] += 1.0;
            rhs[b] += y;
        }
    }
    gram.iter()
        .zip(&rhs)
        .map(|(g, r)| if *g > 0.0 { Some(r / g) } else { None })
        .collect()
}

/// Brute-force conditional means of the velocity target on a bin grid.
///
/// `samples` draws with `t` uniform on the grid's time range; bins are
/// compared to the exact bin-averaged conditional mean when `k < 1`.
pub fn posterior_mean_oracle(
    joint: &ToyJoint,
    k: f64,
    grid: &BinGrid,
    samples: usize,
    min_count: usize,
    seed: u64,
) -> Result<OracleReport> {
    joint.validate()?;
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::contract(format!("k = {k} outside [0, 1]")));
    }
    if grid.t_range.1 >= 1.0 || grid.t_range.0 < 0.0 {
        return Err(Error::contract("time bins must lie inside [0, 1)"));
    }
    let mut rng = Rng::stream(seed, 0);
    let n = grid.len();
    let mut bin_of = Vec::with_capacity(samples);
    let mut us = Vec::with_capacity(samples);
    let (mut sum, mut sum_sq, mut count) = (vec![0.0; n], vec![0.0; n], vec![0usize; n]);
    let (mut sx, mut st) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..samples {
        let t = grid.t_range.0 + (grid.t_range.1 - grid.t_range.0) * rng.uniform();
        let (x, u) = joint.draw(k, t, &mut rng);
        let b = grid.locate(x, t);
        if let Some(b) = b {
            sum[b] += u;
            sum_sq[b] += u * u;
            count[b] += 1;
            sx[b] += x;
            st[b] += t;
        }
        bin_of.push(b);
        us.push(u);
    }
    let lsq = per_bin_least_squares(&bin_of, &us, n);
    let mut bins = Vec::new();
    let (mut empty, mut sparse, mut checked) = (0, 0, 0);
    let (mut gap, mut max_sigma) = (0.0f64, 0.0f64);
    for j in 0..grid.t_bins {
        for i in 0..grid.x_bins {
            let b = j * grid.x_bins + i;
            let c = count[b];
            if c == 0 {
                empty += 1;
                continue;
            }
            let cf = c as f64;
            let mean = sum[b] / cf;
            let var = if c > 1 {
                ((sum_sq[b] - cf * mean * mean) / (cf - 1.0)).max(0.0)
            } else {
                0.0
            };
            let std_err = (var / cf).sqrt();
            let minimizer = lsq[b].expect("populated bin");
            gap = gap.max((mean - minimizer).abs());
            let (xe, te) = (grid.x_edges(i), grid.t_edges(j));
            let (analytic, at_centroid) = if k < 1.0 {
                (
                    Some(joint.bin_average(k, xe, te)?),
                    Some(joint.posterior_velocity(k, sx[b] / cf, st[b] / cf)?),
                )
            } else {
                (None, None)
            };
            if c < min_count {
                sparse += 1;
            } else if let Some(a) = analytic {
                checked += 1;
                let d = (mean - a).abs();
                let s = if d == 0.0 { 0.0 } else { d / std_err };
                max_sigma = max_sigma.max(s);
            }
            bins.push(BinReport {
                x_range: xe,
                t_range: te,
                count: c,
                mean,
                l2_minimizer: minimizer,
                std_err,
                analytic,
                analytic_at_centroid: at_centroid,
            });
        }
    }
    Ok(OracleReport {
        k,
        samples,
        seed,
        bins,
        empty_bins: empty,
        sparse_bins: sparse,
        min_count,
        estimator_gap: gap,
        max_sigma,
        checked_bins: checked,
    })
}

/// Smooth test functions `phi` with derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Constant,
    /// `x^p` for `p` in 1..=3.
    Monomial(u32),
    /// `x^p exp(-x^2 / (2 w^2))`.
    Windowed { power: u32, width: f64 },
}

impl TestFunction {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Constant => 1.0,
            TestFunction::Monomial(p) => x.powi(p as i32),
            TestFunction::Windowed { power, width } => x.powi(power as i32) * (-x * x / (2.0 * width * width)).exp(),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Constant => 0.0,
            TestFunction::Monomial(0) => 0.0,
            TestFunction::Monomial(p) => p as f64 * x.powi(p as i32 - 1),
            TestFunction::Windowed { power, width } => {
                let g = (-x * x / (2.0 * width * width)).exp();
                let poly = if power == 0 { 0.0 } else { power as f64 * x.powi(power as i32 - 1) };
                g * (poly - x.powi(power as i32 + 1) / (width * width))
            }
        }
    }

    pub fn basis() -> Vec<TestFunction> {
        let mut out = vec![TestFunction::Constant, TestFunction::Monomial(1), TestFunction::Monomial(2)];
        out.extend((0..3).map(|p| TestFunction::Windowed { power: p, width: 1.5 }));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub phi: TestFunction,
    pub t: f64,
    /// Central difference in `t` of `E[phi(x_t)]`.
    pub lhs: f64,
    /// `E[phi'(x_t) g(x_t, t)]` with the closed-form conditional mean.
    pub rhs: f64,
    /// Same right side with the binned estimate of the conditional mean.
    pub rhs_binned: Option<f64>,
    pub sigma: f64,
    /// `|lhs - rhs| / sigma`, zero when both sides agree exactly.
    pub deviation_sigmas: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub k: f64,
    pub samples: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub rows: Vec<ContinuityRow>,
    pub max_deviation_sigmas: f64,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Check `d/dt E[phi(x_t)] = E[phi'(x_t) g(x_t, t)]` by Monte Carlo.
///
/// The left side uses common random numbers at `t +- h`; the right side uses
/// an independent sample set, so the two standard errors add in quadrature.
/// At `k = 1` the conditional mean is the per-draw velocity.
pub fn continuity_check(
    joint: &ToyJoint,
    k: f64,
    t_grid: &[f64],
    samples: usize,
    seed: u64,
    binned: Option<&OracleReport>,
) -> Result<ContinuityReport> {
    joint.validate()?;
    if samples < 2 {
        return Err(Error::contract("continuity check needs at least 2 samples"));
    }
    let h = 1e-3;
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (ti, &t) in t_grid.iter().enumerate() {
        if !(t - h > 0.0 && t + h < 1.0) {
            return Err(Error::contract(format!("t = {t} too close to the endpoints")));
        }
        for (pi, phi) in TestFunction::basis().into_iter().enumerate() {
            let stream = (ti * 64 + pi) as u64;
            let mut lrng = Rng::stream(seed, 2 * stream);
            let mut rrng = Rng::stream(seed, 2 * stream + 1);
            let mut lhs_v = Vec::with_capacity(samples);
            let mut rhs_v = Vec::with_capacity(samples);
            let mut rhs_b = Vec::with_capacity(samples);
            for _ in 0..samples {
                let (x0, x1) = joint.pick(&mut lrng);
                let z = lrng.normal();
                let at = |s: f64| s * x1 + k * (1.0 - s) * x0 + (1.0 - s) * (1.0 - k) * z;
                lhs_v.push((phi.value(at(t + h)) - phi.value(at(t - h))) / (2.0 * h));

                let (x, u) = joint.draw(k, t, &mut rrng);
                let g = if k < 1.0 { joint.posterior_velocity(k, x, t)? } else { u };
                rhs_v.push(phi.derivative(x) * g);
                if let Some(rep) = binned {
                    let gb = lookup_bin(rep, x, t).unwrap_or(g);
                    rhs_b.push(phi.derivative(x) * gb);
                }
            }
            let (lhs, sl) = mean_and_se(&lhs_v);
            let (rhs, sr) = mean_and_se(&rhs_v);
            let sigma = (sl * sl + sr * sr).sqrt();
            let d = (lhs - rhs).abs();
            let dev = if d == 0.0 { 0.0 } else { d / sigma };
            worst = worst.max(dev);
            rows.push(ContinuityRow {
                phi,
                t,
                lhs,
                rhs,
                rhs_binned: binned.map(|_| mean_and_se(&rhs_b).0),
                sigma,
                deviation_sigmas: dev,
            });
        }
    }
    Ok(ContinuityReport {
        k,
        samples,
        fd_step: h,
        seed,
        rows,
        max_deviation_sigmas: worst,
    })
}

fn lookup_bin(rep: &OracleReport, x: f64, t: f64) -> Option<f64> {
    rep.bins
        .iter()
        .find(|b| x >= b.x_range.0 && x < b.x_range.1 && t >= b.t_range.0 && t < b.t_range.1)
        .map(|b| b.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_one_single_atom_is_constant_velocity() {
        let rep = posterior_mean_oracle(&ToyJoint::single(0.0, 1.0), 1.0, &BinGrid::default(), 20_000, 1, 1).unwrap();
        assert!(rep.bins.iter().all(|b| (b.mean - 1.0).abs() < 1e-12));
        assert!(rep.empty_bins > 0);
        assert_eq!(rep.estimator_gap, 0.0);
    }

    #[test]
    fn symmetric_pair_has_zero_mean_at_origin() {
        let joint = ToyJoint {
            atoms: vec![(-1.0, 1.0, 1.0), (1.0, -1.0, 1.0)],
        };
        // At t near 0 with k = 1 the states sit at +-1, so one wide bin around 0 holds both.
        let grid = BinGrid {
            x_bins: 1,
            x_range: (-1.5, 1.5),
            t_bins: 1,
            t_range: (0.0, 1e-3),
        };
        let rep = posterior_mean_oracle(&joint, 1.0, &grid, 100_000, 1, 2).unwrap();
        let b = &rep.bins[0];
        assert_eq!(b.count, 100_000);
        assert!(b.mean.abs() < 4.0 * b.std_err, "{} +- {}", b.mean, b.std_err);
        assert!(joint.posterior_velocity(0.0, 0.0, 0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bin_average_of_narrow_cell_matches_point_value() {
        let j = ToyJoint {
            atoms: vec![(0.0, 1.0, 2.0), (0.5, -1.0, 1.0)],
        };
        let a = j.bin_average(0.3, (0.2, 0.2001), (0.4, 0.4001)).unwrap();
        let p = j.posterior_velocity(0.3, 0.20005, 0.40005).unwrap();
        assert!((a - p).abs() < 1e-6, "{a} {p}");
    }

    #[test]
    fn posterior_velocity_single_atom_is_quotient() {
        let j = ToyJoint::single(0.3, -0.7);
        let v = j.posterior_velocity(0.2, 0.5, 0.4).unwrap();
        assert!((v - (-0.7 - 0.5) / 0.6).abs() < 1e-14);
        assert!(matches!(j.posterior_velocity(1.0, 0.5, 0.4), Err(Error::DegenerateKernel { .. })));
    }

    #[test]
    fn test_function_derivatives() {
        for phi in TestFunction::basis() {
            for &x in &[-1.3, 0.0, 0.4, 2.2] {
                let h = 1e-6;
                let fd = (phi.value(x + h) - phi.value(x - h)) / (2.0 * h);
                assert!((fd - phi.derivative(x)).abs() < 1e-7, "{phi:?} at {x}");
            }
        }
    }

    #[test]
    fn linear_statistic_at_k_one() {
        let rep = continuity_check(&ToyJoint::single(0.25, 1.5), 1.0, &[0.5], 100, 3, None).unwrap();
        let row = rep.rows.iter().find(|r| r.phi == TestFunction::Monomial(1)).unwrap();
        assert!((row.lhs - 1.25).abs() < 1e-9 && (row.rhs - 1.25).abs() < 1e-12);
        let c = rep.rows.iter().find(|r| r.phi == TestFunction::Constant).unwrap();
        assert_eq!((c.lhs, c.rhs, c.deviation_sigmas), (0.0, 0.0, 0.0));
    }
}
