//! Run configuration. TOML or JSON on disk; the canonical JSON form is hashed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FmtArch, PyramidSpec, Sampler01};
use crate::optim::AdamWConfig;
use crate::pde::{GenSpec, GridSpec, ParamRanges, System};
use crate::train::Schedule;
use crate::vae::VaeArch;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub fmt: FmtConfig,
    pub sample: SampleConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub system: System,
    pub side: usize,
    pub channels: usize,
    pub trajectories: usize,
    /// States per trajectory.
    pub states: usize,
    pub dt: f64,
    pub seed: u64,
    pub spectrum_decay: f64,
    pub diffusivity: (f64, f64),
    pub velocity_x: (f64, f64),
    pub velocity_y: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            system: System::Heat,
            side: 32,
            channels: 1,
            trajectories: 500,
            states: 10,
            dt: 0.25,
            seed: 0,
            spectrum_decay: 3.0,
            diffusivity: (0.02, 0.06),
            velocity_x: (0.5, 1.0),
            velocity_y: (0.5, 1.0),
        }
    }
}

impl DataConfig {
    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            system: self.system,
            grid: GridSpec::square(self.side, self.channels),
            count: self.trajectories,
            states: self.states,
            dt: self.dt,
            ranges: ParamRanges {
                diffusivity: self.diffusivity,
                velocity_x: self.velocity_x,
                velocity_y: self.velocity_y,
            },
            spectrum_decay: self.spectrum_decay,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub width: usize,
    pub latent_channels: usize,
    pub factor: usize,
    pub beta: f64,
    pub steps: usize,
    pub batch: usize,
    /// Fixed gradient partition; results do not depend on the thread count.
    pub micro_batch: usize,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            width: 16,
            latent_channels: 4,
            factor: 4,
            beta: 1e-3,
            steps: 2000,
            batch: 16,
            micro_batch: 8,
            log_interval: 50,
            checkpoint_interval: 500,
            seed: 1,
            optimizer: AdamWConfig {
                lr: 2e-3,
                beta1: 0.9,
                beta2: 0.995,
                eps: 1e-8,
                weight_decay: 1e-4,
                grad_clip: 0.0,
                warmup_frac: 0.1,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmtConfig {
    pub width: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub time_dim: usize,
    /// Explicit pyramid factors; absent means the automatic choice for the latent side.
    pub pyramid: Option<[usize; 4]>,
    pub steps: usize,
    pub batch: usize,
    /// Fixed gradient partition; results do not depend on the thread count.
    pub micro_batch: usize,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub t_sampler: Sampler01,
    pub k_sampler: Sampler01,
    pub lambda_vae: f64,
    /// Validation windows used for periodic one-step L2RE.
    pub valid_windows: usize,
}

impl Default for FmtConfig {
    fn default() -> Self {
        FmtConfig {
            width: 32,
            blocks: 2,
            hidden: 32,
            time_dim: 16,
            pyramid: None,
            steps: 5000,
            batch: 16,
            micro_batch: 16,
            log_interval: 50,
            checkpoint_interval: 1000,
            seed: 2,
            optimizer: AdamWConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                weight_decay: 0.01,
                grad_clip: 0.0,
                warmup_frac: 0.1,
            },
            t_sampler: Sampler01::Uniform,
            k_sampler: Sampler01::Uniform,
            lambda_vae: 1.0,
            valid_windows: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub k3: f64,
    pub eta: f64,
    pub eps_floor: f64,
    pub ensemble_size: usize,
    pub horizon: usize,
    pub rollout_trajectories: usize,
    pub k3_sweep: Vec<f64>,
    pub eta_sweep: Vec<f64>,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 100,
            k3: 1.0,
            eta: 0.0,
            eps_floor: 1.0,
            ensemble_size: 32,
            horizon: 16,
            rollout_trajectories: 16,
            k3_sweep: vec![1.0, 0.8, 0.6, 0.4, 0.1],
            eta_sweep: vec![0.0, 0.1, 0.4, 0.7, 1.0],
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Total draws for the posterior-mean oracle.
    pub oracle_samples: usize,
    /// Bins with fewer draws are left out of the analytic comparison.
    pub samples_per_bin: usize,
    pub continuity_samples: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            oracle_samples: 4_000_000,
            samples_per_bin: 1000,
            continuity_samples: 100_000,
            seed: 4,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical JSON: keys sorted at every level, no whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&sort_keys(v))?)
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn hash_of<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Config = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// `.json` files are parsed as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        hash_of(self)
    }

    pub fn latent_side(&self) -> usize {
        self.data.side / self.vae.factor
    }

    pub fn vae_arch(&self) -> VaeArch {
        VaeArch {
            channels: self.data.channels,
            latent_channels: self.vae.latent_channels,
            width: self.vae.width,
            factor: self.vae.factor,
        }
    }

    pub fn fmt_arch(&self) -> FmtArch {
        FmtArch {
            latent_channels: self.vae.latent_channels,
            width: self.fmt.width,
            blocks: self.fmt.blocks,
            hidden: self.fmt.hidden,
            time_dim: self.fmt.time_dim,
        }
    }

    pub fn pyramid(&self) -> PyramidSpec {
        match self.fmt.pyramid {
            Some(factors) => PyramidSpec { factors },
            None => PyramidSpec::auto(self.latent_side()),
        }
    }

    pub fn vae_schedule(&self) -> Schedule {
        let v = &self.vae;
        Schedule {
            steps: v.steps,
            batch: v.batch,
            micro_batch: v.micro_batch,
            log_interval: v.log_interval,
            checkpoint_interval: v.checkpoint_interval,
            seed: v.seed,
        }
    }

    pub fn fmt_schedule(&self) -> Schedule {
        let f = &self.fmt;
        Schedule {
            steps: f.steps,
            batch: f.batch,
            micro_batch: f.micro_batch,
            log_interval: f.log_interval,
            checkpoint_interval: f.checkpoint_interval,
            seed: f.seed,
        }
    }

    pub fn vae_arch_hash(&self) -> Result<String> {
        hash_of(&self.vae_arch())
    }

    /// Flow-model checkpoints depend on both architectures and the pyramid.
    pub fn fmt_arch_hash(&self) -> Result<String> {
        hash_of(&(self.vae_arch(), self.fmt_arch(), self.pyramid()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        GridSpec::square(d.side, d.channels).validate()?;
        if d.trajectories == 0 {
            return Err(Error::config("data.trajectories must be >= 1"));
        }
        if d.states < 4 || !(d.dt > 0.0) {
            return Err(Error::config("data.states must be >= 4 and data.dt > 0"));
        }
        for (name, r) in [("diffusivity", d.diffusivity), ("velocity_x", d.velocity_x), ("velocity_y", d.velocity_y)] {
            if !(r.0 <= r.1) {
                return Err(Error::config(format!("data.{name} range must satisfy lo <= hi")));
            }
        }
        self.vae_arch().validate()?;
        if d.side % self.vae.factor != 0 {
            return Err(Error::config("vae.factor must divide data.side"));
        }
        self.fmt_arch().validate()?;
        self.pyramid().validate(self.latent_side())?;
        for (name, v) in [("vae", &self.vae.optimizer), ("fmt", &self.fmt.optimizer)] {
            v.validate().map_err(|e| Error::config(format!("{name}.optimizer: {e}")))?;
        }
        let pos = [
            ("vae.steps", self.vae.steps),
            ("vae.batch", self.vae.batch),
            ("vae.micro_batch", self.vae.micro_batch),
            ("vae.log_interval", self.vae.log_interval),
            ("vae.checkpoint_interval", self.vae.checkpoint_interval),
            ("fmt.steps", self.fmt.steps),
            ("fmt.batch", self.fmt.batch),
            ("fmt.micro_batch", self.fmt.micro_batch),
            ("fmt.log_interval", self.fmt.log_interval),
            ("fmt.checkpoint_interval", self.fmt.checkpoint_interval),
            ("sample.steps", self.sample.steps),
            ("sample.horizon", self.sample.horizon),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        for (name, log, ckpt) in [
            ("vae", self.vae.log_interval, self.vae.checkpoint_interval),
            ("fmt", self.fmt.log_interval, self.fmt.checkpoint_interval),
        ] {
            if ckpt % log != 0 {
                return Err(Error::config(format!("{name}.checkpoint_interval must be a multiple of {name}.log_interval")));
            }
        }
        if self.vae.beta < 0.0 || self.fmt.lambda_vae < 0.0 {
            return Err(Error::config("vae.beta and fmt.lambda_vae must be >= 0"));
        }
        self.fmt.t_sampler.validate("fmt.t_sampler")?;
        self.fmt.k_sampler.validate("fmt.k_sampler")?;
        let s = &self.sample;
        if !(0.0..=1.0).contains(&s.k3) || s.k3_sweep.iter().any(|k| !(0.0..=1.0).contains(k)) {
            return Err(Error::config("sample.k3 values must lie in [0, 1]"));
        }
        if s.eta < 0.0 || s.eta_sweep.iter().any(|e| *e < 0.0) || !(s.eps_floor > 0.0) {
            return Err(Error::config("sample.eta must be >= 0 and sample.eps_floor > 0"));
        }
        Ok(())
    }
}
