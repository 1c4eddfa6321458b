//! Error-accumulation bounds for autoregressive rollouts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-step operator `x -> x + G(x)` learned with relative accuracy `rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorErrorModel {
    /// Lipschitz constant of the true dynamics.
    pub lipschitz: f64,
    pub rho: f64,
    pub d_max: f64,
    pub delta0: f64,
}

impl OperatorErrorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lipschitz > 0.0 && self.rho >= 0.0 && self.d_max > 0.0 && self.delta0 >= 0.0) {
            return Err(Error::contract(format!("invalid operator error model {self:?}")));
        }
        Ok(())
    }

    /// The bound satisfies `delta_{n+1} = L delta_n + rho D_max`.
    pub fn step(&self, delta: f64) -> f64 {
        self.lipschitz * delta + self.rho * self.d_max
    }
}

/// `L^n delta0 + rho D_max sum_{j<n} L^(n-1-j)`, the geometric sum in closed form.
pub fn operator_bound(m: &OperatorErrorModel, n: u32) -> Result<f64> {
    m.validate()?;
    let l = m.lipschitz;
    let ln = l.powi(n as i32);
    let geometric = if l == 1.0 { n as f64 } else { (ln - 1.0) / (l - 1.0) };
    Ok(ln * m.delta0 + m.rho * m.d_max * geometric)
}

/// Fixed point `rho D_max / (1 - L)`, defined only for `L < 1`.
pub fn operator_limit(m: &OperatorErrorModel) -> Result<f64> {
    m.validate()?;
    if m.lipschitz >= 1.0 {
        return Err(Error::Regime(format!("operator bound grows without limit for L = {}", m.lipschitz)));
    }
    Ok(m.rho * m.d_max / (1.0 - m.lipschitz))
}

/// Flow-marching rollout with a preconditioned residual of Lipschitz constant `L < 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmErrorModel {
    pub lipschitz: f64,
    pub rho: f64,
    pub d_max: f64,
    pub delta0: f64,
    /// Residual integration time left at the last step; `None` picks `exp(-1/(1-L))`.
    pub eps_time: Option<f64>,
}

impl FmErrorModel {
    pub fn validate(&self) -> Result<()> {
        if self.lipschitz >= 1.0 {
            return Err(Error::Regime(format!(
                "constant bound requires L < 1, got L = {}",
                self.lipschitz
            )));
        }
        if !(self.lipschitz >= 0.0 && self.rho >= 0.0 && self.d_max > 0.0 && self.delta0 >= 0.0) {
            return Err(Error::contract(format!("invalid flow-marching error model {self:?}")));
        }
        if let Some(e) = self.eps_time {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::contract(format!("residual time must lie in (0, 1), got {e}")));
            }
        }
        Ok(())
    }

    pub fn optimal_eps(&self) -> f64 {
        (-1.0 / (1.0 - self.lipschitz)).exp()
    }

    /// Contraction `a = eps^(1-L)` and offset `b = -rho eps^(1-L) ln(eps) D_max`.
    ///
    /// At the optimal residual time these are `e^-1` and `rho e^-1 D_max / (1 - L)`.
    pub fn coefficients(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let one_minus_l = 1.0 - self.lipschitz;
        match self.eps_time {
            None => {
                let a = (-1.0f64).exp();
                Ok((a, self.rho / one_minus_l * a * self.d_max))
            }
            Some(eps) => {
                let a = eps.powf(one_minus_l);
                Ok((a, -self.rho * a * eps.ln() * self.d_max))
            }
        }
    }
}

/// `a^n delta0 + b (1 - a^n) / (1 - a)`: the recursion `delta_{n+1} = a delta_n + b` unrolled.
pub fn fm_bound(m: &FmErrorModel, n: u32) -> Result<f64> {
    let (a, b) = m.coefficients()?;
    let an = a.powi(n as i32);
    Ok(an * m.delta0 + b * (1.0 - an) / (1.0 - a))
}

/// `b / (1 - a)`; at the optimal residual time `rho D_max / ((1 - L)(e - 1))`.
pub fn fm_limit(m: &FmErrorModel) -> Result<f64> {
    let (a, b) = m.coefficients()?;
    Ok(b / (1.0 - a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(l: f64, rho: f64, delta0: f64) -> OperatorErrorModel {
        OperatorErrorModel {
            lipschitz: l,
            rho,
            d_max: 1.0,
            delta0,
        }
    }

    fn fm(l: f64, rho: f64) -> FmErrorModel {
        FmErrorModel {
            lipschitz: l,
            rho,
            d_max: 1.0,
            delta0: 0.0,
            eps_time: None,
        }
    }

    #[test]
    fn operator_hand_values() {
        assert!((operator_bound(&op(2.0, 0.1, 0.0), 3).unwrap() - 0.7).abs() < 1e-15);
        for n in 0..20 {
            assert!((operator_bound(&op(1.0, 0.1, 0.0), n).unwrap() - 0.1 * n as f64).abs() < 1e-12);
            assert_eq!(operator_bound(&op(1.7, 0.0, 0.0), n).unwrap(), 0.0);
        }
    }

    #[test]
    fn operator_matches_recursion() {
        for m in [op(2.0, 0.1, 0.3), op(0.5, 0.2, 1.0), op(1.0, 0.05, 0.2)] {
            let mut d = m.delta0;
            for n in 0..30 {
                let closed = operator_bound(&m, n).unwrap();
                assert!((closed - d).abs() <= 1e-9 * d.abs().max(1.0), "{m:?} n={n}");
                d = m.step(d);
            }
        }
        let m = op(0.5, 0.2, 1.0);
        assert!((operator_bound(&m, 200).unwrap() - operator_limit(&m).unwrap()).abs() < 1e-10);
        assert!(matches!(operator_limit(&op(1.0, 0.1, 0.0)), Err(Error::Regime(_))));
    }

    #[test]
    fn fm_limit_value() {
        let lim = fm_limit(&fm(0.5, 0.1)).unwrap();
        let expected = 0.1 / (0.5 * (std::f64::consts::E - 1.0));
        assert!((lim - expected).abs() < 1e-12);
        assert!((lim - 0.11640).abs() < 1e-5);
        assert_eq!(fm_bound(&fm(0.5, 0.0), 10).unwrap(), 0.0);
    }

    #[test]
    fn fm_recursion_converges_monotonically() {
        let m = fm(0.5, 0.1);
        let (a, b) = m.coefficients().unwrap();
        assert!((a - (-1.0f64).exp()).abs() < 1e-15);
        let lim = fm_limit(&m).unwrap();
        let mut d = 0.0;
        let mut prev = 0.0;
        for n in 0..=60 {
            let closed = fm_bound(&m, n).unwrap();
            assert!((closed - d).abs() < 1e-14);
            assert!(closed >= prev);
            prev = closed;
            d = a * d + b;
        }
        assert!((lim - prev).abs() < 1e-10);
    }

    #[test]
    fn optimal_eps_reproduces_e_inverse() {
        let m = fm(0.3, 0.2);
        let explicit = FmErrorModel {
            eps_time: Some(m.optimal_eps()),
            ..m
        };
        let (a0, b0) = m.coefficients().unwrap();
        let (a1, b1) = explicit.coefficients().unwrap();
        assert!((a0 - a1).abs() < 1e-14 && (b0 - b1).abs() < 1e-14);
    }

    #[test]
    fn regime_error_for_l_at_least_one() {
        assert!(matches!(fm_bound(&fm(1.0, 0.1), 3), Err(Error::Regime(_))));
        assert!(matches!(fm_limit(&fm(1.5, 0.1)), Err(Error::Regime(_))));
    }
}
