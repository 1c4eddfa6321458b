//! End-to-end stages shared by the command line and the experiments:
//! data preparation, the two training stages, finetuning and rollout evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{FlowModel, PyramidSpec};
use crate::analysis::TrainingBudget;
use crate::checkpoint::Checkpoint;
use crate::pde::dataset::{self, DatasetManifest, Splits};
use crate::pde::{generate, l2re, vrmse, Normalizer, Trajectory};
use crate::rng::Rng;
use crate::sampler::{ensemble_stats, generate_next, rollout, Integrator, OdeConfig, SdeConfig};
use crate::tensor::Tensor;
use crate::train::{
    encode_states, window_index, FinetuneTask, FmtTask, OneStepCase, RunFiles, Trainer, VaeTask,
};
use crate::vae::Vae;

/// Trajectories with their split and train-split normalization.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub trajectories: Vec<Trajectory>,
    pub splits: Splits,
    pub norm: Normalizer,
}

impl Prepared {
    pub fn new(trajectories: Vec<Trajectory>, splits: Splits) -> Result<Self> {
        if splits.train + splits.valid + splits.test != trajectories.len() || splits.train == 0 {
            return Err(Error::contract("splits do not partition the trajectories"));
        }
        let norm = Normalizer::fit(&trajectories[..splits.train])?;
        Ok(Prepared {
            trajectories,
            splits,
            norm,
        })
    }

    /// Read a dataset directory (`data.fmds` plus its `data.json` sidecar) and check it
    /// against the sidecar's checksum and normalization.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(dataset::SIDECAR_FILE))?;
        let sidecar: DatasetManifest = serde_json::from_str(&text)?;
        let (header, trajs) = dataset::decode(&std::fs::read(dir.join(dataset::DATA_FILE))?)?;
        if format!("{:08x}", header.checksum) != sidecar.checksum {
            return Err(Error::Corruption(format!(
                "{} does not match its sidecar checksum",
                dir.join(dataset::DATA_FILE).display()
            )));
        }
        let prepared = Self::new(trajs, sidecar.splits)?;
        if prepared.norm != sidecar.normalization {
            return Err(Error::Corruption("sidecar normalization does not match the data".into()));
        }
        Ok(prepared)
    }

    pub fn generate(cfg: &Config) -> Result<Self> {
        let trajs = generate(&cfg.data.gen_spec())?;
        let splits = Splits::eight_one_one(trajs.len());
        Self::new(trajs, splits)
    }

    pub fn train(&self) -> &[Trajectory] {
        &self.trajectories[..self.splits.train]
    }

    pub fn valid(&self) -> &[Trajectory] {
        &self.trajectories[self.splits.train..self.splits.train + self.splits.valid]
    }

    pub fn test(&self) -> &[Trajectory] {
        &self.trajectories[self.splits.train + self.splits.valid..]
    }

    pub fn normalized(&self, trajs: &[Trajectory]) -> Vec<Vec<Tensor>> {
        trajs
            .iter()
            .map(|t| t.states.iter().map(|s| self.norm.normalize(s)).collect())
            .collect()
    }
}

/// Cap on held-out states used for periodic reconstruction checks.
const VALID_STATES: usize = 64;

pub fn vae_task(cfg: &Config, data: &Prepared) -> Result<VaeTask> {
    let vae = Vae::new(cfg.vae_arch(), &mut Rng::stream(cfg.vae.seed, 0))?;
    let train = data.normalized(data.train()).into_iter().flatten().collect();
    let valid: Vec<Tensor> = data.normalized(data.valid()).into_iter().flatten().collect();
    let stride = (valid.len() / VALID_STATES).max(1);
    Ok(VaeTask {
        vae,
        arch_hash: cfg.vae_arch_hash()?,
        beta: cfg.vae.beta,
        train,
        valid: valid.into_iter().step_by(stride).take(VALID_STATES).collect(),
    })
}

pub fn vae_trainer(cfg: &Config, data: &Prepared, files: RunFiles, threads: usize) -> Result<Trainer<VaeTask>> {
    Trainer::new(vae_task(cfg, data)?, cfg.vae_schedule(), &[cfg.vae.optimizer], files, threads)
}

pub fn train_vae(cfg: &Config, data: &Prepared, files: RunFiles, threads: usize) -> Result<Trainer<VaeTask>> {
    let mut t = vae_trainer(cfg, data, files, threads)?;
    t.run()?;
    Ok(t)
}

/// The autoencoder stored in the `vae` section of any checkpoint kind.
pub fn load_vae(cfg: &Config, ckpt: &Checkpoint) -> Result<Vae> {
    let mut vae = Vae::new(cfg.vae_arch(), &mut Rng::new(0))?;
    ckpt.section("vae")?.restore(&cfg.vae_arch_hash()?, &mut vae.params)?;
    Ok(vae)
}

/// The flow model stored in the `flow` section of an `fmt` or `finetune` checkpoint.
pub fn load_flow(cfg: &Config, ckpt: &Checkpoint) -> Result<FlowModel> {
    let mut model = FlowModel::new(cfg.fmt_arch(), &mut Rng::new(0))?;
    ckpt.section("flow")?.restore(&cfg.fmt_arch_hash()?, &mut model.params)?;
    Ok(model)
}

/// Latent means of every state of every trajectory.
pub fn encode_trajectories(vae: &Vae, data: &Prepared, trajs: &[Trajectory]) -> Result<Vec<Vec<Tensor>>> {
    data.normalized(trajs).iter().map(|states| encode_states(vae, states)).collect()
}

/// One-step cases from evenly spread windows of `trajs`.
pub fn one_step_cases(vae: &Vae, data: &Prepared, trajs: &[Trajectory], limit: usize) -> Result<Vec<OneStepCase>> {
    let lengths: Vec<usize> = trajs.iter().map(Trajectory::len).collect();
    let windows = window_index(&lengths);
    let stride = (windows.len() / limit.max(1)).max(1);
    let mut cases = Vec::new();
    for &(tr, o) in windows.iter().step_by(stride).take(limit) {
        let states: Vec<Tensor> = trajs[tr].states[o..o + 3].iter().map(|s| data.norm.normalize(s)).collect();
        let lat = encode_states(vae, &states)?;
        cases.push(OneStepCase {
            history: [lat[0].clone(), lat[1].clone(), lat[2].clone()],
            truth: trajs[tr].states[o + 3].clone(),
        });
    }
    Ok(cases)
}

pub fn fmt_task(cfg: &Config, data: &Prepared, vae: &Vae) -> Result<FmtTask> {
    let model = FlowModel::new(cfg.fmt_arch(), &mut Rng::stream(cfg.fmt.seed, 0))?;
    let latents = encode_trajectories(vae, data, data.train())?;
    let lengths: Vec<usize> = latents.iter().map(Vec::len).collect();
    Ok(FmtTask {
        model,
        arch_hash: cfg.fmt_arch_hash()?,
        spec: cfg.pyramid(),
        t_sampler: cfg.fmt.t_sampler,
        k_sampler: cfg.fmt.k_sampler,
        windows: window_index(&lengths),
        latents,
        vae: vae.clone(),
        vae_arch_hash: cfg.vae_arch_hash()?,
        norm: data.norm.clone(),
        valid: one_step_cases(vae, data, data.valid(), cfg.fmt.valid_windows)?,
        valid_ode: OdeConfig { steps: cfg.sample.steps },
    })
}

pub fn fmt_trainer(cfg: &Config, data: &Prepared, vae: &Vae, files: RunFiles, threads: usize) -> Result<Trainer<FmtTask>> {
    Trainer::new(fmt_task(cfg, data, vae)?, cfg.fmt_schedule(), &[cfg.fmt.optimizer], files, threads)
}

pub fn train_fmt(cfg: &Config, data: &Prepared, vae: &Vae, files: RunFiles, threads: usize) -> Result<Trainer<FmtTask>> {
    let mut t = fmt_trainer(cfg, data, vae, files, threads)?;
    t.run()?;
    Ok(t)
}

/// Joint finetune starting from pretrained models on `data`.
pub fn finetune_task(cfg: &Config, data: &Prepared, model: FlowModel, vae: Vae) -> Result<FinetuneTask> {
    let pixels = data.normalized(data.train());
    let lengths: Vec<usize> = pixels.iter().map(Vec::len).collect();
    let valid_raw: Vec<Vec<Tensor>> = data.valid().iter().map(|t| t.states.clone()).collect();
    let vlen: Vec<usize> = valid_raw.iter().map(Vec::len).collect();
    let all_valid = window_index(&vlen);
    let stride = (all_valid.len() / cfg.fmt.valid_windows.max(1)).max(1);
    Ok(FinetuneTask {
        model,
        arch_hash: cfg.fmt_arch_hash()?,
        vae,
        vae_arch_hash: cfg.vae_arch_hash()?,
        spec: cfg.pyramid(),
        t_sampler: cfg.fmt.t_sampler,
        k_sampler: cfg.fmt.k_sampler,
        beta: cfg.vae.beta,
        lambda: cfg.fmt.lambda_vae,
        windows: window_index(&lengths),
        pixels,
        norm: data.norm.clone(),
        valid_raw,
        valid_windows: all_valid.into_iter().step_by(stride).take(cfg.fmt.valid_windows).collect(),
        valid_ode: OdeConfig { steps: cfg.sample.steps },
    })
}

/// Joint trainer on the fmt schedule; the flow model uses the fmt optimizer and the VAE its own.
pub fn finetune_trainer(
    cfg: &Config,
    data: &Prepared,
    model: FlowModel,
    vae: Vae,
    files: RunFiles,
    threads: usize,
) -> Result<Trainer<FinetuneTask>> {
    let task = finetune_task(cfg, data, model, vae)?;
    Trainer::new(task, cfg.fmt_schedule(), &[cfg.fmt.optimizer, cfg.vae.optimizer], files, threads)
}

/// CRC32 of the encoded trajectories, hex.
pub fn data_checksum(trajs: &[Trajectory]) -> Result<String> {
    Ok(format!("{:08x}", crc32fast::hash(&dataset::encode(trajs, false)?)))
}

/// Budget of a flow-model training run on `data`, for matched comparisons.
pub fn fmt_budget(cfg: &Config, model: &FlowModel, data: &Prepared) -> Result<TrainingBudget> {
    Ok(TrainingBudget {
        steps: cfg.fmt.steps as u64,
        batch: cfg.fmt.batch,
        param_count: model.param_count(),
        data_checksum: data_checksum(data.train())?,
    })
}

/// Sampler for deterministic evaluation from the sample section.
pub fn integrator(cfg: &Config, eta: f64) -> Integrator {
    if eta == 0.0 {
        Integrator::Ode(OdeConfig { steps: cfg.sample.steps })
    } else {
        Integrator::Sde(SdeConfig {
            eta,
            eps_floor: cfg.sample.eps_floor,
            steps: cfg.sample.steps,
        })
    }
}

/// Above this mean L2RE a rollout is considered diverged and stopped.
pub const DIVERGENCE_L2RE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    /// Mean over trajectories at each step, 1-based; shorter than the horizon if stopped early.
    pub l2re: Vec<f64>,
    pub vrmse: Vec<f64>,
    /// `per_trajectory[i][s]` is the L2RE of trajectory `i` at step `s + 1`.
    pub per_trajectory: Vec<Vec<f64>>,
    pub diverged: bool,
    pub n_traj: usize,
}

impl RolloutReport {
    /// Steps reported in the summary: 1, 5, 10 and the last one, when reached.
    pub fn summary_steps(&self) -> Vec<usize> {
        let last = self.l2re.len();
        let mut steps: Vec<usize> = [1, 5, 10].into_iter().filter(|&s| s < last).collect();
        if last > 0 {
            steps.push(last);
        }
        steps
    }

    pub fn final_l2re(&self) -> Result<f64> {
        self.l2re.last().copied().ok_or(Error::UndefinedMetric("empty rollout"))
    }

    /// `step,l2re,vrmse` rows, then `summary` rows at the reporting steps and their average.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l2re,vrmse\n");
        for (i, (a, b)) in self.l2re.iter().zip(&self.vrmse).enumerate() {
            out.push_str(&format!("{},{a:e},{b:e}\n", i + 1));
        }
        let steps = self.summary_steps();
        for &s in &steps {
            out.push_str(&format!("summary_{s},{:e},{:e}\n", self.l2re[s - 1], self.vrmse[s - 1]));
        }
        if !steps.is_empty() {
            let n = steps.len() as f64;
            let a: f64 = steps.iter().map(|&s| self.l2re[s - 1]).sum::<f64>() / n;
            let b: f64 = steps.iter().map(|&s| self.vrmse[s - 1]).sum::<f64>() / n;
            out.push_str(&format!("summary_mean,{a:e},{b:e}\n"));
        }
        out
    }
}

/// Autoregressive rollout from the first four states of each trajectory, scored in physical units.
///
/// Latents are fed forward directly; only the metrics decode.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_rollout(
    model: &FlowModel,
    spec: &PyramidSpec,
    vae: &Vae,
    norm: &Normalizer,
    trajs: &[Trajectory],
    horizon: usize,
    integrator: &Integrator,
    seed: u64,
) -> Result<RolloutReport> {
    if trajs.is_empty() {
        return Err(Error::contract("rollout needs at least one trajectory"));
    }
    let offset = 3;
    if trajs.iter().any(|t| t.len() < offset + horizon) {
        return Err(Error::contract(format!("trajectories too short for horizon {horizon}")));
    }
    let n = trajs.len();
    let mut history = Vec::with_capacity(3);
    for j in 0..3 {
        let states: Vec<Tensor> = trajs.iter().map(|t| norm.normalize(&t.states[j])).collect();
        history.push(vae.encode_mean(&Tensor::stack(&states)?)?);
    }
    let mut rngs: Vec<Rng> = (0..n).map(|i| Rng::stream(seed, i as u64)).collect();
    let mut per = vec![Vec::new(); n];
    let mut means = (Vec::new(), Vec::new());
    let mut diverged = false;
    let mut monitor = |step: usize, state: &Tensor| -> Result<bool> {
        let pixels = norm.denormalize(&vae.decode(state)?);
        let (mut a, mut b) = (0.0, 0.0);
        for (i, t) in trajs.iter().enumerate() {
            let truth = &t.states[offset + step - 1];
            let e = l2re(&pixels.index(i), truth)?;
            per[i].push(e);
            a += e;
            b += vrmse(&pixels.index(i), truth)?;
        }
        let (a, b) = (a / n as f64, b / n as f64);
        means.0.push(a);
        means.1.push(b);
        if a > DIVERGENCE_L2RE || !a.is_finite() {
            diverged = true;
            return Ok(false);
        }
        Ok(true)
    };
    rollout(model, spec, &history, horizon, integrator, &mut rngs, &mut monitor)?;
    Ok(RolloutReport {
        l2re: means.0,
        vrmse: means.1,
        per_trajectory: per,
        diverged,
        n_traj: n,
    })
}

/// Decoded ensemble for the state following `traj.states[offset..offset + 3]`.
///
/// Member `i` draws from stream `(seed, i)`; the history is shared.
#[allow(clippy::too_many_arguments)]
pub fn ensemble(
    model: &FlowModel,
    spec: &PyramidSpec,
    vae: &Vae,
    norm: &Normalizer,
    traj: &Trajectory,
    offset: usize,
    members: usize,
    k3: f64,
    integrator: &Integrator,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if members < 2 {
        return Err(Error::contract(format!("ensemble needs at least 2 members, got {members}")));
    }
    if traj.len() < offset + 3 {
        return Err(Error::contract("trajectory too short for the ensemble history"));
    }
    let mut history = Vec::with_capacity(3);
    for s in &traj.states[offset..offset + 3] {
        let lat = vae.encode_mean(&norm.normalize(s))?;
        history.push(Tensor::stack(&vec![lat; members])?);
    }
    let mut rngs: Vec<Rng> = (0..members).map(|i| Rng::stream(seed, i as u64)).collect();
    let next = generate_next(model, spec, &history, k3, integrator, &mut rngs)?;
    Ok(norm.denormalize(&vae.decode(&next)?).unstack())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub knob: f64,
    pub mean_variance: f64,
}

/// Scalar ensemble variance for each initial-noise level, ODE sampling.
#[allow(clippy::too_many_arguments)]
pub fn k3_sweep(
    model: &FlowModel,
    spec: &PyramidSpec,
    vae: &Vae,
    norm: &Normalizer,
    traj: &Trajectory,
    members: usize,
    values: &[f64],
    ode: OdeConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&k3| {
            let m = ensemble(model, spec, vae, norm, traj, 0, members, k3, &Integrator::Ode(ode), seed)?;
            Ok(SweepRow {
                knob: k3,
                mean_variance: ensemble_stats(&m)?.mean_variance,
            })
        })
        .collect()
}

/// Scalar ensemble variance for each SDE noise scale with `k3 = 1`.
#[allow(clippy::too_many_arguments)]
pub fn eta_sweep(
    model: &FlowModel,
    spec: &PyramidSpec,
    vae: &Vae,
    norm: &Normalizer,
    traj: &Trajectory,
    members: usize,
    values: &[f64],
    sde: SdeConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&eta| {
            let integ = Integrator::Sde(SdeConfig { eta, ..sde });
            let m = ensemble(model, spec, vae, norm, traj, 0, members, 1.0, &integ, seed)?;
            Ok(SweepRow {
                knob: eta,
                mean_variance: ensemble_stats(&m)?.mean_variance,
            })
        })
        .collect()
}

pub fn sweep_csv(name: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{name},mean_variance\n");
    for r in rows {
        out.push_str(&format!("{},{:e}\n", r.knob, r.mean_variance));
    }
    out
}

/// Inversions against the expected direction: `increasing` asks for non-decreasing variance.
pub fn trend_inversions(rows: &[SweepRow], increasing: bool) -> usize {
    rows.windows(2)
        .filter(|w| {
            let d = w[1].mean_variance - w[0].mean_variance;
            if increasing {
                d < 0.0
            } else {
                d > 0.0
            }
        })
        .count()
}
