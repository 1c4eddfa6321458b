//! Ground-truth trajectories for the toy PDE systems, plus metrics and storage.

pub mod dataset;
mod ic;
mod metrics;
mod normalize;
mod solvers;
pub(crate) mod spectral;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use ic::make_initial_condition;
pub use metrics::{l2re, vrmse};
pub use normalize::Normalizer;
pub use solvers::{solve_advection, solve_burgers, solve_burgers_refined, solve_heat, HeatScheme};

/// Periodic square grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub domain_length: f64,
}

impl GridSpec {
    pub fn square(side: usize, channels: usize) -> Self {
        GridSpec {
            height: side,
            width: side,
            channels,
            domain_length: 2.0 * std::f64::consts::PI,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height != self.width {
            return Err(Error::config(format!("grid must be square, got {}x{}", self.height, self.width)));
        }
        if ![16, 32, 64].contains(&self.height) {
            return Err(Error::config(format!("grid side {} not in {{16, 32, 64}}", self.height)));
        }
        if ![1, 2].contains(&self.channels) {
            return Err(Error::config(format!("channels {} not in {{1, 2}}", self.channels)));
        }
        if !(self.domain_length > 0.0) {
            return Err(Error::config("domain_length must be positive"));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn dx(&self) -> f64 {
        self.domain_length / self.width as f64
    }

    pub(crate) fn check(&self, state: &Tensor) -> Result<()> {
        if state.shape() != self.shape() {
            return Err(Error::Dimension {
                op: "grid",
                lhs: state.shape().to_vec(),
                rhs: self.shape().to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Heat,
    Advection,
    Burgers,
}

impl System {
    pub const ALL: [System; 3] = [System::Heat, System::Advection, System::Burgers];

    pub fn code(self) -> u8 {
        match self {
            System::Heat => 0,
            System::Advection => 1,
            System::Burgers => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|s| s.code() == code)
            .ok_or_else(|| Error::Corruption(format!("unknown system code {code}")))
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::Heat => "heat",
            System::Advection => "advection",
            System::Burgers => "burgers",
        })
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(System::Heat),
            "advection" => Ok(System::Advection),
            "burgers" => Ok(System::Burgers),
            other => Err(Error::config(format!(
                "unknown system '{other}', expected one of {{heat, advection, burgers}}"
            ))),
        }
    }
}

/// Per-trajectory physical coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub diffusivity: f64,
    pub velocity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub system: System,
    pub params: SystemParams,
    pub dt: f64,
    pub grid: GridSpec,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Ranges that per-trajectory coefficients are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    pub diffusivity: (f64, f64),
    pub velocity_x: (f64, f64),
    pub velocity_y: (f64, f64),
}

impl ParamRanges {
    fn draw(&self, rng: &mut Rng) -> SystemParams {
        let pick = |r: (f64, f64), rng: &mut Rng| r.0 + (r.1 - r.0) * rng.uniform();
        SystemParams {
            diffusivity: pick(self.diffusivity, rng),
            velocity: (pick(self.velocity_x, rng), pick(self.velocity_y, rng)),
        }
    }
}

/// Everything needed to regenerate a set of trajectories bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub system: System,
    pub grid: GridSpec,
    pub count: usize,
    pub states: usize,
    pub dt: f64,
    pub ranges: ParamRanges,
    pub spectrum_decay: f64,
    pub seed: u64,
}

/// Simulate `spec.count` trajectories; trajectory `i` uses its own random stream.
pub fn generate(spec: &GenSpec) -> Result<Vec<Trajectory>> {
    spec.grid.validate()?;
    if spec.states < 4 {
        return Err(Error::config(format!("need at least 4 states per trajectory, got {}", spec.states)));
    }
    (0..spec.count)
        .map(|i| {
            let mut rng = Rng::stream(spec.seed, 1 + i as u64);
            let params = spec.ranges.draw(&mut rng);
            let ic = make_initial_condition(&mut rng, &spec.grid, spec.spectrum_decay)?;
            let steps = spec.states - 1;
            match spec.system {
                System::Heat => solve_heat(&spec.grid, &ic, params.diffusivity, steps, spec.dt, HeatScheme::Spectral),
                System::Advection => solve_advection(&spec.grid, &ic, params.velocity, steps, spec.dt),
                System::Burgers => solve_burgers(&spec.grid, &ic, params.diffusivity, steps, spec.dt),
            }
        })
        .collect()
}
