use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowmarch::analysis::suite::{verify_suite, Check};
use flowmarch::checkpoint::Checkpoint;
use flowmarch::config::Config;
use flowmarch::pde::dataset::{self, DatasetManifest, Splits, DATA_FILE, SIDECAR_FILE};
use flowmarch::pde::{generate, l2re, Trajectory};
use flowmarch::pipeline::{
    eta_sweep, evaluate_rollout, fmt_trainer, finetune_trainer, integrator, k3_sweep, load_flow, load_vae,
    sweep_csv, vae_trainer, Prepared, SweepRow,
};
use flowmarch::sampler::{ensemble_stats, Integrator, OdeConfig, SdeConfig};
use flowmarch::train::{RunFiles, Task, Trainer};
use flowmarch::Error;
use serde::Serialize;

use crate::manifest::{now_unix, version, RunManifest};
use crate::{Cli, Command};

/// A command ran to completion but its checks did not pass.
#[derive(Debug)]
pub struct Failed(pub String);

impl fmt::Display for Failed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn load_config(path: &Path) -> Result<Config> {
    Config::load(path).with_context(|| format!("loading config {}", path.display()))
}

/// Bookkeeping for one invocation; `finish` writes the manifest.
struct Run {
    cfg: Config,
    seed: u64,
    command: &'static str,
    started: u64,
    dir: PathBuf,
    outputs: Vec<String>,
    metrics: BTreeMap<String, f64>,
}

impl Run {
    fn start(cfg: Config, seed: u64, command: &'static str, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run {
            cfg,
            seed,
            command,
            started: now_unix(),
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.output(name);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    fn output(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.outputs.sort();
        let m = RunManifest {
            config_hash: self.cfg.hash()?,
            seed: self.seed,
            version: version(),
            command: self.command.to_string(),
            started_unix: self.started,
            finished_unix: now_unix(),
            config: serde_json::to_value(&self.cfg)?,
            metrics: self.metrics,
            outputs: self.outputs,
        };
        m.write(&self.dir)?;
        Ok(m)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match &cli.command {
        Command::GenData { common, system, force } => {
            let mut cfg = load_config(&common.config)?;
            if let Some(s) = system {
                cfg.data.system = *s;
            }
            gen_data(cfg, &common.out, *force)
        }
        Command::TrainVae {
            common,
            data,
            until,
            force,
        } => train_vae(load_config(&common.config)?, data, &common.out, *until, *force, threads),
        Command::TrainFmt {
            common,
            data,
            vae,
            finetune,
            init,
            until,
            force,
        } => {
            let cfg = load_config(&common.config)?;
            let init = if *finetune { init.as_deref() } else { None };
            train_fmt(cfg, data, vae.as_deref(), init, &common.out, *until, *force, threads)
        }
        Command::Rollout {
            common,
            data,
            ckpt,
            operator,
            eta,
        } => rollout(load_config(&common.config)?, data, ckpt, &common.out, *operator, *eta),
        Command::Ensemble {
            common,
            data,
            ckpt,
            trajectory,
        } => ensemble(load_config(&common.config)?, data, ckpt, &common.out, *trajectory),
        Command::Verify { config, out } => {
            let cfg = match config {
                Some(p) => load_config(p)?,
                None => Config::default(),
            };
            verify(cfg, out)
        }
    }
}

pub fn gen_data(cfg: Config, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    if out.join(DATA_FILE).exists() && !force {
        return Err(Error::Config(format!(
            "{} already holds a dataset; pass --force to replace it",
            out.display()
        ))
        .into());
    }
    let spec = cfg.data.gen_spec();
    let seed = cfg.data.seed;
    let mut run = Run::start(cfg, seed, "gen-data", out)?;
    let trajs = generate(&spec)?;
    let header = dataset::write_dataset(&run.path(DATA_FILE), &trajs)?;
    run.output(DATA_FILE);
    // Statistics come from the stored (f32) values so that readers see the same numbers.
    let stored = dataset::read_dataset(&run.path(DATA_FILE))?;
    let splits = Splits::eight_one_one(stored.len());
    let prepared = Prepared::new(stored, splits)?;
    let sidecar = DatasetManifest {
        format: "FMDS".into(),
        version: header.version,
        generator: spec,
        splits,
        normalization: prepared.norm.clone(),
        checksum: format!("{:08x}", header.checksum),
    };
    run.write_json(SIDECAR_FILE, &sidecar)?;
    run.metric("trajectories", header.count as f64);
    run.metric("states", header.states as f64);
    run.metric("train", splits.train as f64);
    run.metric("valid", splits.valid as f64);
    run.metric("test", splits.test as f64);
    run.metric("checksum", header.checksum as f64);
    run.finish()?;
    Ok(())
}

pub fn load_data(dir: &Path) -> Result<Prepared> {
    Prepared::from_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Checkpoint to resume from, after clearing files of an incompatible previous run.
fn previous_run(files: &RunFiles, kind: &str, force: bool) -> Result<Option<Checkpoint>> {
    let ckpt_path = files.checkpoint().expect("run directory");
    let logs = [files.metrics(), files.validation()];
    if ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.config_hash == files.config_hash && ckpt.kind == kind {
            return Ok(Some(ckpt));
        }
        if !force {
            return Err(Error::Config(format!(
                "{} holds a '{}' run with config hash {}, not {}; pass --force to start over",
                ckpt_path.parent().unwrap_or(Path::new(".")).display(),
                ckpt.kind,
                ckpt.config_hash,
                files.config_hash
            ))
            .into());
        }
        std::fs::remove_file(&ckpt_path)?;
    }
    // Logs without a checkpoint belong to a run that never reached its first checkpoint.
    for p in logs.into_iter().flatten() {
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    Ok(None)
}

fn last_csv_value(path: &Path) -> Result<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .last()
        .and_then(|l| l.split(',').nth(1))
        .and_then(|v| v.parse().ok()))
}

fn drive<T: Task>(run: &mut Run, trainer: &mut Trainer<T>, resume: Option<Checkpoint>, until: Option<usize>) -> Result<()> {
    if let Some(ck) = resume {
        trainer.resume(&ck)?;
        eprintln!("resuming at step {}", trainer.step);
    }
    trainer.run_until(until.unwrap_or(trainer.schedule.steps))?;
    run.metric("step", trainer.step as f64);
    let files = trainer.files.clone();
    for (name, path) in [
        ("checkpoint.ckpt", files.checkpoint()),
        ("metrics.csv", files.metrics()),
        ("valid.csv", files.validation()),
    ] {
        if path.is_some_and(|p| p.exists()) {
            run.output(name);
        }
    }
    if let Some(v) = last_csv_value(&files.metrics().expect("run directory"))? {
        run.metric("loss", v);
    }
    if let Some(v) = last_csv_value(&files.validation().expect("run directory"))? {
        run.metric("valid_l2re", v);
    }
    Ok(())
}

pub fn train_vae(cfg: Config, data: &Path, out: &Path, until: Option<usize>, force: bool, threads: usize) -> Result<()> {
    let prepared = load_data(data)?;
    let hash = cfg.hash()?;
    let seed = cfg.vae.seed;
    let mut run = Run::start(cfg, seed, "train-vae", out)?;
    let files = RunFiles::at(out, &hash);
    let resume = previous_run(&files, "vae", force)?;
    let mut trainer = vae_trainer(&run.cfg, &prepared, files, threads)?;
    drive(&mut run, &mut trainer, resume, until)?;
    run.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_fmt(
    cfg: Config,
    data: &Path,
    vae: Option<&Path>,
    init: Option<&Path>,
    out: &Path,
    until: Option<usize>,
    force: bool,
    threads: usize,
) -> Result<()> {
    let prepared = load_data(data)?;
    let hash = cfg.hash()?;
    let seed = cfg.fmt.seed;
    let files = RunFiles::at(out, &hash);
    match init {
        Some(init) => {
            let ck = load_checkpoint(init)?;
            let model = load_flow(&cfg, &ck)?;
            let vae = load_vae(&cfg, &ck)?;
            let mut run = Run::start(cfg, seed, "train-fmt --finetune", out)?;
            let resume = previous_run(&files, "finetune", force)?;
            let mut trainer = finetune_trainer(&run.cfg, &prepared, model, vae, files, threads)?;
            drive(&mut run, &mut trainer, resume, until)?;
            run.finish()?;
        }
        None => {
            let Some(vae_path) = vae else {
                return Err(Error::Config("train-fmt needs a frozen VAE checkpoint (--vae)".into()).into());
            };
            if !vae_path.exists() {
                return Err(Error::Config(format!("VAE checkpoint {} does not exist", vae_path.display())).into());
            }
            let vae = load_vae(&cfg, &load_checkpoint(vae_path)?)?;
            let mut run = Run::start(cfg, seed, "train-fmt", out)?;
            let resume = previous_run(&files, "fmt", force)?;
            let mut trainer = fmt_trainer(&run.cfg, &prepared, &vae, files, threads)?;
            drive(&mut run, &mut trainer, resume, until)?;
            run.finish()?;
        }
    }
    Ok(())
}

pub fn rollout(cfg: Config, data: &Path, ckpt: &Path, out: &Path, operator: bool, eta: Option<f64>) -> Result<()> {
    let prepared = load_data(data)?;
    let ck = load_checkpoint(ckpt)?;
    let model = load_flow(&cfg, &ck)?;
    let vae = load_vae(&cfg, &ck)?;
    let test = prepared.test();
    if test.is_empty() {
        bail!(Error::Config("dataset has no test trajectories".into()));
    }
    let trajs = &test[..test.len().min(cfg.sample.rollout_trajectories)];
    let integ = if operator {
        Integrator::Ode(OdeConfig { steps: 1 })
    } else {
        integrator(&cfg, eta.unwrap_or(cfg.sample.eta))
    };
    let seed = cfg.sample.seed;
    let mut run = Run::start(cfg, seed, "rollout", out)?;
    let s = &run.cfg.sample;
    let report = evaluate_rollout(&model, &run.cfg.pyramid(), &vae, &prepared.norm, trajs, s.horizon, &integ, s.seed)?;
    run.write("rollout.csv", report.to_csv())?;
    run.metric("steps", report.l2re.len() as f64);
    run.metric("n_traj", report.n_traj as f64);
    run.metric("diverged", if report.diverged { 1.0 } else { 0.0 });
    run.metric("final_l2re", report.final_l2re()?);
    run.metric("final_vrmse", *report.vrmse.last().expect("non-empty rollout"));
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct EnsembleSummary {
    trajectory: usize,
    members: usize,
    k3: f64,
    eta: f64,
    mean_variance: f64,
    /// L2RE of the ensemble mean against the true next state.
    mean_l2re: f64,
    k3_sweep: Vec<SweepRow>,
    eta_sweep: Vec<SweepRow>,
}

pub fn ensemble(cfg: Config, data: &Path, ckpt: &Path, out: &Path, trajectory: usize) -> Result<()> {
    let prepared = load_data(data)?;
    let ck = load_checkpoint(ckpt)?;
    let model = load_flow(&cfg, &ck)?;
    let vae = load_vae(&cfg, &ck)?;
    let Some(traj) = prepared.test().get(trajectory) else {
        bail!(Error::Config(format!(
            "test split has {} trajectories, asked for index {trajectory}",
            prepared.test().len()
        )));
    };
    let seed = cfg.sample.seed;
    let mut run = Run::start(cfg, seed, "ensemble", out)?;
    let (spec, s) = (run.cfg.pyramid(), run.cfg.sample.clone());
    let integ = integrator(&run.cfg, s.eta);
    let members = flowmarch::pipeline::ensemble(
        &model,
        &spec,
        &vae,
        &prepared.norm,
        traj,
        0,
        s.ensemble_size,
        s.k3,
        &integ,
        s.seed,
    )?;
    let stats = ensemble_stats(&members)?;
    let as_trajs: Vec<Trajectory> = members
        .iter()
        .map(|m| {
            let mut states = traj.states[..3].to_vec();
            states.push(m.clone());
            Trajectory {
                states,
                ..traj.clone()
            }
        })
        .collect();
    dataset::write_dataset(&run.path("members.fmds"), &as_trajs)?;
    run.output("members.fmds");

    let ode = OdeConfig { steps: s.steps };
    let sde = SdeConfig {
        eta: 0.0,
        eps_floor: s.eps_floor,
        steps: s.steps,
    };
    let norm = &prepared.norm;
    let k3_rows = k3_sweep(&model, &spec, &vae, norm, traj, s.ensemble_size, &s.k3_sweep, ode, s.seed)?;
    let eta_rows = eta_sweep(&model, &spec, &vae, norm, traj, s.ensemble_size, &s.eta_sweep, sde, s.seed)?;
    run.write("k3_sweep.csv", sweep_csv("k3", &k3_rows))?;
    run.write("eta_sweep.csv", sweep_csv("eta", &eta_rows))?;
    let summary = EnsembleSummary {
        trajectory,
        members: members.len(),
        k3: s.k3,
        eta: s.eta,
        mean_variance: stats.mean_variance,
        mean_l2re: l2re(&stats.mean, &traj.states[3])?,
        k3_sweep: k3_rows,
        eta_sweep: eta_rows,
    };
    run.write_json("stats.json", &summary)?;
    run.metric("members", summary.members as f64);
    run.metric("mean_variance", summary.mean_variance);
    run.metric("mean_l2re", summary.mean_l2re);
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    config_hash: String,
    seed: u64,
    pass: bool,
    checks: &'a [Check],
}

pub fn verify(cfg: Config, out: &Path) -> Result<()> {
    let seed = cfg.analysis.seed;
    let mut run = Run::start(cfg, seed, "verify", out)?;
    let checks = verify_suite(&run.cfg.analysis)?;
    let pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        eprintln!("{} {} (value {:e}, tolerance {:e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    let report = VerifyReport {
        config_hash: run.cfg.hash()?,
        seed,
        pass,
        checks: &checks,
    };
    run.write_json("verify.json", &report)?;
    run.metric("checks", checks.len() as f64);
    run.metric("failed", checks.iter().filter(|c| !c.pass).count() as f64);
    run.finish()?;
    if !pass {
        return Err(Failed("verification checks failed".into()).into());
    }
    Ok(())
}
