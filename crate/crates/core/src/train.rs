//! Training loops for the autoencoder, the flow model and the joint finetune.
//!
//! Each optimizer step draws a batch from a seeded per-epoch permutation,
//! splits it into fixed micro-batches, evaluates them (possibly on several
//! threads) and sums the gradients in micro-batch order. The result does not
//! depend on the thread count.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section};
use crate::error::{Error, Result};
use crate::model::{cfm_loss, pyramid_down, FlowModel, PyramidSpec, Sampler01, WindowDraws};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{Grads, ParamStore};
use crate::pde::{l2re, Normalizer};
use crate::rng::Rng;
use crate::sampler::{generate_next, Integrator, OdeConfig};
use crate::tensor::{Graph, Tensor};
use crate::vae::Vae;

const ORDER_STREAM: u64 = 1;
const DRAW_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub batch: usize,
    pub micro_batch: usize,
    pub log_interval: usize,
    /// Checkpoint and validation cadence; a multiple of `log_interval`.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.micro_batch == 0 || self.log_interval == 0 {
            return Err(Error::config("steps, batch, micro_batch and log_interval must be >= 1"));
        }
        if self.checkpoint_interval == 0 || self.checkpoint_interval % self.log_interval != 0 {
            return Err(Error::config("checkpoint_interval must be a positive multiple of log_interval"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    /// Mean training loss over the steps since the previous row.
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Something the loop can optimize.
pub trait Task: Sync {
    fn kind(&self) -> &'static str;
    /// Number of training examples the permutation runs over.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Trainable stores as `(role, arch hash, store)`.
    fn trainable(&self) -> Vec<(&'static str, String, &ParamStore)>;
    fn trainable_mut(&mut self) -> Vec<&mut ParamStore>;
    /// Frozen models recorded alongside the trainable ones.
    fn frozen(&self) -> Vec<Section> {
        Vec::new()
    }
    /// Mean loss over `items` and one gradient per trainable store.
    fn loss_grads(&self, items: &[usize], rng: &mut Rng) -> Result<(f64, Vec<Grads>)>;
    /// Held-out L2RE used for periodic validation.
    fn validate(&self) -> Result<f64>;
}

/// Where a run writes its files; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunFiles {
    pub dir: Option<PathBuf>,
    pub config_hash: String,
}

impl RunFiles {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn at(dir: &Path, config_hash: &str) -> Self {
        RunFiles {
            dir: Some(dir.to_path_buf()),
            config_hash: config_hash.to_string(),
        }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.path("checkpoint.ckpt")
    }

    pub fn metrics(&self) -> Option<PathBuf> {
        self.path("metrics.csv")
    }

    pub fn validation(&self) -> Option<PathBuf> {
        self.path("valid.csv")
    }
}

pub struct Trainer<T: Task> {
    pub task: T,
    pub opts: Vec<AdamW>,
    /// Optimizer steps completed.
    pub step: usize,
    pub schedule: Schedule,
    pub metrics: Vec<MetricRow>,
    pub validation: Vec<(usize, f64)>,
    pub files: RunFiles,
    pool: Option<rayon::ThreadPool>,
    started: Instant,
    pending: Vec<f64>,
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

/// Keep the header and the rows whose first column is at most `step`.
fn truncate_csv(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

impl<T: Task> Trainer<T> {
    pub fn new(task: T, schedule: Schedule, optimizers: &[AdamWConfig], files: RunFiles, threads: usize) -> Result<Self> {
        schedule.validate()?;
        if task.is_empty() {
            return Err(Error::contract("no training examples"));
        }
        let stores = task.trainable();
        if optimizers.len() != stores.len() {
            return Err(Error::contract("one optimizer config per trainable store"));
        }
        for c in optimizers {
            c.validate()?;
        }
        let opts = stores.iter().zip(optimizers).map(|((_, _, s), c)| AdamW::new(*c, s)).collect();
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            task,
            opts,
            step: 0,
            schedule,
            metrics: Vec::new(),
            validation: Vec::new(),
            files,
            pool,
            started: Instant::now(),
            pending: Vec::new(),
        })
    }

    /// Continue from a checkpoint written by an identically configured run.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.kind != self.task.kind() {
            return Err(Error::contract(format!(
                "checkpoint kind '{}' cannot resume a '{}' run",
                ckpt.kind,
                self.task.kind()
            )));
        }
        let meta: Vec<(&'static str, String)> =
            self.task.trainable().into_iter().map(|(r, h, _)| (r, h)).collect();
        for (i, (role, hash)) in meta.iter().enumerate() {
            let section = ckpt.section(role)?;
            section.restore(hash, self.task.trainable_mut()[i])?;
            self.opts[i] = section
                .optimizer
                .clone()
                .ok_or_else(|| Error::contract(format!("section '{role}' has no optimizer state")))?;
        }
        self.step = ckpt.step as usize;
        let expected = Rng::stream(self.schedule.seed, DRAW_STREAM).fork(self.step as u64).state();
        if ckpt.rng != expected {
            return Err(Error::contract("checkpoint RNG position does not match its step"));
        }
        self.pending.clear();
        self.metrics.retain(|r| r.step <= self.step);
        self.validation.retain(|r| r.0 <= self.step);
        for p in [self.files.metrics(), self.files.validation()].into_iter().flatten() {
            truncate_csv(&p, self.step)?;
        }
        Ok(())
    }

    /// Example indices used by optimizer step `step` (0-based).
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.task.len();
        let b = self.schedule.batch;
        let per_epoch = (n / b).max(1);
        let epoch = step / per_epoch;
        let slot = step % per_epoch;
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::stream(self.schedule.seed, ORDER_STREAM).fork(epoch as u64).shuffle(&mut perm);
        (0..b).map(|i| perm[(slot * b + i) % n]).collect()
    }

    fn checkpoint_value(&self) -> Checkpoint {
        let mut sections: Vec<Section> = self
            .task
            .trainable()
            .into_iter()
            .zip(&self.opts)
            .map(|((role, hash, store), opt)| Section::new(role, &hash, store, Some(opt)))
            .collect();
        sections.extend(self.task.frozen());
        Checkpoint {
            kind: self.task.kind().to_string(),
            step: self.step as u64,
            rng: Rng::stream(self.schedule.seed, DRAW_STREAM).fork(self.step as u64).state(),
            config_hash: self.files.config_hash.clone(),
            sections,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.checkpoint_value()
    }

    fn micro_results(&self, items: &[usize], rng: &Rng) -> Result<Vec<(usize, f64, Vec<Grads>)>> {
        let chunks: Vec<(usize, &[usize])> = items.chunks(self.schedule.micro_batch).enumerate().collect();
        let run = |&(i, chunk): &(usize, &[usize])| -> Result<(usize, f64, Vec<Grads>)> {
            let mut r = rng.fork(i as u64);
            let (loss, grads) = self.task.loss_grads(chunk, &mut r)?;
            Ok((chunk.len(), loss, grads))
        };
        match &self.pool {
            Some(pool) => pool.install(|| chunks.par_iter().map(run).collect()),
            None => chunks.iter().map(run).collect(),
        }
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step;
        let items = self.batch_indices(step);
        let rng = Rng::stream(self.schedule.seed, DRAW_STREAM).fork(step as u64);
        let parts = self.micro_results(&items, &rng)?;
        let total = items.len() as f64;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Grads>> = None;
        for (n, l, mut g) in parts {
            let w = n as f64 / total;
            loss += w * l;
            g.iter_mut().for_each(|x| x.scale(w));
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.accumulate(b)),
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                op: format!("training loss at step {}", step + 1),
            });
        }
        let grads = grads.expect("at least one micro-batch");
        let lrs: Vec<f64> = self
            .opts
            .iter()
            .map(|o| cosine_lr(o.config.lr, step, self.schedule.steps, o.config.warmup_frac))
            .collect();
        // Apply only once every store's update is known to be finite.
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                op: format!("gradient at step {}", step + 1),
            });
        }
        let mut stores = self.task.trainable_mut();
        for ((opt, store), (g, lr)) in self.opts.iter_mut().zip(stores.iter_mut()).zip(grads.iter().zip(&lrs)) {
            opt.update(store, g, *lr)?;
        }
        self.step += 1;
        self.pending.push(loss);
        Ok(loss)
    }

    fn current_lr(&self) -> f64 {
        let o = &self.opts[0];
        cosine_lr(o.config.lr, self.step.saturating_sub(1), self.schedule.steps, o.config.warmup_frac)
    }

    /// Train until `until` steps are complete (capped at the schedule length).
    ///
    /// Logs, validates and checkpoints on the configured cadence. On a
    /// non-finite loss the most recent checkpoint on disk is left untouched.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.schedule.steps);
        while self.step < until {
            self.train_step()?;
            let s = self.step;
            if s % self.schedule.log_interval == 0 {
                let row = MetricRow {
                    step: s,
                    loss: self.pending.iter().sum::<f64>() / self.pending.len() as f64,
                    lr: self.current_lr(),
                    wall_time: self.started.elapsed().as_secs_f64(),
                };
                self.pending.clear();
                if let Some(p) = self.files.metrics() {
                    append_line(
                        &p,
                        "step,loss,lr,wall_time",
                        &format!("{},{:e},{:e},{:.3}", row.step, row.loss, row.lr, row.wall_time),
                    )?;
                }
                self.metrics.push(row);
            }
            if s % self.schedule.checkpoint_interval == 0 || s == self.schedule.steps {
                let v = self.task.validate()?;
                if let Some(p) = self.files.validation() {
                    append_line(&p, "step,l2re", &format!("{s},{v:e}"))?;
                }
                self.validation.push((s, v));
                if let Some(p) = self.files.checkpoint() {
                    self.checkpoint_value().save(&p)?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.schedule.steps)
    }
}

/// Batch a set of `[C, H, W]` tensors picked by `items`.
fn gather(pool: &[Tensor], items: &[usize]) -> Result<Tensor> {
    Tensor::stack(&items.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>())
}

/// Autoencoder training on individual normalized states.
pub struct VaeTask {
    pub vae: Vae,
    pub arch_hash: String,
    pub beta: f64,
    pub train: Vec<Tensor>,
    pub valid: Vec<Tensor>,
}

/// Mean per-sample L2RE of `decode(encode_mean(x))`.
pub fn recon_l2re(vae: &Vae, states: &[Tensor]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::UndefinedMetric("reconstruction L2RE of an empty set"));
    }
    let mut total = 0.0;
    for chunk in states.chunks(32) {
        let x = Tensor::stack(chunk)?;
        let rec = vae.decode(&vae.encode_mean(&x)?)?;
        for i in 0..chunk.len() {
            total += l2re(&rec.index(i), &chunk[i])?;
        }
    }
    Ok(total / states.len() as f64)
}

impl Task for VaeTask {
    fn kind(&self) -> &'static str {
        "vae"
    }

    fn len(&self) -> usize {
        self.train.len()
    }

    fn trainable(&self) -> Vec<(&'static str, String, &ParamStore)> {
        vec![("vae", self.arch_hash.clone(), &self.vae.params)]
    }

    fn trainable_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.vae.params]
    }

    fn loss_grads(&self, items: &[usize], rng: &mut Rng) -> Result<(f64, Vec<Grads>)> {
        let x = gather(&self.train, items)?;
        let a = &self.vae.arch;
        let s = x.shape();
        let eps = rng.normal_tensor(&[s[0], a.latent_channels, s[2] / a.factor, s[3] / a.factor]);
        let mut g = Graph::new();
        let vars = self.vae.loss_graph(&mut g, &x, &eps, self.beta)?;
        g.backward(vars.total)?;
        Ok((g.value(vars.total).item(), vec![g.param_grads(&self.vae.params)]))
    }

    fn validate(&self) -> Result<f64> {
        recon_l2re(&self.vae, &self.valid)
    }
}

/// Consecutive four-state windows over a set of trajectories.
pub fn window_index(lengths: &[usize]) -> Vec<(usize, usize)> {
    lengths
        .iter()
        .enumerate()
        .flat_map(|(tr, &n)| (0..n.saturating_sub(3)).map(move |o| (tr, o)))
        .collect()
}

/// Latent means of every state of a trajectory, `[C, h, w]` each.
pub fn encode_states(vae: &Vae, states: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(states.len());
    for chunk in states.chunks(32) {
        out.extend(vae.encode_mean(&Tensor::stack(chunk)?)?.unstack());
    }
    Ok(out)
}

/// Held-out one-step prediction cases: three latent history states and the raw next state.
#[derive(Clone, Debug)]
pub struct OneStepCase {
    pub history: [Tensor; 3],
    pub truth: Tensor,
}

/// Mean per-case L2RE in physical units of k3 = 1 ODE predictions.
pub fn one_step_l2re(
    model: &FlowModel,
    spec: &PyramidSpec,
    vae: &Vae,
    norm: &Normalizer,
    cases: &[OneStepCase],
    ode: OdeConfig,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::UndefinedMetric("one-step L2RE of an empty set"));
    }
    let mut total = 0.0;
    for chunk in cases.chunks(32) {
        let hist: Vec<Tensor> = (0..3)
            .map(|j| Tensor::stack(&chunk.iter().map(|c| c.history[j].clone()).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let mut rngs: Vec<Rng> = (0..chunk.len()).map(|i| Rng::new(i as u64)).collect();
        let next = generate_next(model, spec, &hist, 1.0, &Integrator::Ode(ode), &mut rngs)?;
        let pixels = norm.denormalize(&vae.decode(&next)?);
        for (i, c) in chunk.iter().enumerate() {
            total += l2re(&pixels.index(i), &c.truth)?;
        }
    }
    Ok(total / cases.len() as f64)
}

/// Windowed flow-marching objective on frozen latent means.
pub struct FmtTask {
    pub model: FlowModel,
    pub arch_hash: String,
    pub spec: PyramidSpec,
    pub t_sampler: Sampler01,
    pub k_sampler: Sampler01,
    /// Latent trajectories, `[C, h, w]` per state.
    pub latents: Vec<Vec<Tensor>>,
    pub windows: Vec<(usize, usize)>,
    /// Frozen decoder and normalization for validation in physical units.
    pub vae: Vae,
    pub vae_arch_hash: String,
    pub norm: Normalizer,
    pub valid: Vec<OneStepCase>,
    pub valid_ode: OdeConfig,
}

/// Batched pyramid levels of the windows picked by `items`.
pub fn window_levels(
    latents: &[Vec<Tensor>],
    windows: &[(usize, usize)],
    items: &[usize],
    spec: &PyramidSpec,
) -> Result<Vec<Tensor>> {
    let states: Vec<Tensor> = (0..4)
        .map(|j| {
            Tensor::stack(
                &items
                    .iter()
                    .map(|&i| {
                        let (tr, o) = windows[i];
                        latents[tr][o + j].clone()
                    })
                    .collect::<Vec<_>>(),
            )
        })
        .collect::<Result<_>>()?;
    pyramid_down(&states, spec)
}

fn term_shapes(levels: &[Tensor]) -> Vec<Vec<usize>> {
    levels[1..].iter().map(|l| l.shape().to_vec()).collect()
}

impl Task for FmtTask {
    fn kind(&self) -> &'static str {
        "fmt"
    }

    fn len(&self) -> usize {
        self.windows.len()
    }

    fn trainable(&self) -> Vec<(&'static str, String, &ParamStore)> {
        vec![("flow", self.arch_hash.clone(), &self.model.params)]
    }

    fn trainable_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.model.params]
    }

    fn frozen(&self) -> Vec<Section> {
        vec![Section::new("vae", &self.vae_arch_hash, &self.vae.params, None)]
    }

    fn loss_grads(&self, items: &[usize], rng: &mut Rng) -> Result<(f64, Vec<Grads>)> {
        let levels = window_levels(&self.latents, &self.windows, items, &self.spec)?;
        let draws = WindowDraws::sample(rng, &term_shapes(&levels), self.t_sampler, self.k_sampler);
        let mut g = Graph::new();
        let terms = cfm_loss(&self.model, &mut g, &levels, &self.spec, &draws)?;
        g.backward(terms.total)?;
        Ok((g.value(terms.total).item(), vec![g.param_grads(&self.model.params)]))
    }

    fn validate(&self) -> Result<f64> {
        one_step_l2re(&self.model, &self.spec, &self.vae, &self.norm, &self.valid, self.valid_ode)
    }
}

/// Joint objective: flow loss on stop-gradient latents plus `lambda` times the autoencoder loss.
pub struct FinetuneTask {
    pub model: FlowModel,
    pub arch_hash: String,
    pub vae: Vae,
    pub vae_arch_hash: String,
    pub spec: PyramidSpec,
    pub t_sampler: Sampler01,
    pub k_sampler: Sampler01,
    pub beta: f64,
    pub lambda: f64,
    /// Normalized physical trajectories, `[C, H, W]` per state.
    pub pixels: Vec<Vec<Tensor>>,
    pub windows: Vec<(usize, usize)>,
    pub norm: Normalizer,
    /// Raw validation trajectories; histories are encoded with the current autoencoder.
    pub valid_raw: Vec<Vec<Tensor>>,
    pub valid_windows: Vec<(usize, usize)>,
    pub valid_ode: OdeConfig,
}

/// Graph nodes of the joint loss.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneVars {
    pub total: crate::tensor::Var,
    pub cfm: crate::tensor::Var,
    pub vae: crate::tensor::Var,
}

/// Build the joint loss for a batch of physical windows `[B, C, H, W]` x 4.
///
/// The latents fed to the flow objective are the encoder means behind a
/// stop-gradient, so the encoder only ever sees the autoencoder gradient.
pub fn finetune_loss(
    model: &FlowModel,
    vae: &Vae,
    spec: &PyramidSpec,
    g: &mut Graph,
    window: &[Tensor],
    eps: &Tensor,
    beta: f64,
    lambda: f64,
    rng: &mut Rng,
    samplers: (Sampler01, Sampler01),
) -> Result<FinetuneVars> {
    if window.len() != 4 {
        return Err(Error::contract(format!("window must have 4 states, got {}", window.len())));
    }
    let b = window[0].shape()[0];
    let all = Tensor::stack(&window.iter().flat_map(|w| w.unstack()).collect::<Vec<_>>())?;
    let vars = vae.loss_graph(g, &all, eps, beta)?;
    let frozen = g.stop_gradient(vars.mean);
    let means = g.value(frozen).unstack();
    let states: Vec<Tensor> = (0..4).map(|j| Tensor::stack(&means[j * b..(j + 1) * b])).collect::<Result<_>>()?;
    let levels = pyramid_down(&states, spec)?;
    let draws = WindowDraws::sample(rng, &term_shapes(&levels), samplers.0, samplers.1);
    let terms = cfm_loss(model, g, &levels, spec, &draws)?;
    let weighted = g.scale(vars.total, lambda)?;
    let total = g.add(terms.total, weighted)?;
    Ok(FinetuneVars {
        total,
        cfm: terms.total,
        vae: vars.total,
    })
}

impl FinetuneTask {
    pub fn valid_cases(&self) -> Result<Vec<OneStepCase>> {
        let mut cases = Vec::with_capacity(self.valid_windows.len());
        for &(tr, o) in &self.valid_windows {
            let states: Vec<Tensor> = self.valid_raw[tr][o..o + 3].iter().map(|s| self.norm.normalize(s)).collect();
            let lat = encode_states(&self.vae, &states)?;
            cases.push(OneStepCase {
                history: [lat[0].clone(), lat[1].clone(), lat[2].clone()],
                truth: self.valid_raw[tr][o + 3].clone(),
            });
        }
        Ok(cases)
    }
}

impl Task for FinetuneTask {
    fn kind(&self) -> &'static str {
        "finetune"
    }

    fn len(&self) -> usize {
        self.windows.len()
    }

    fn trainable(&self) -> Vec<(&'static str, String, &ParamStore)> {
        vec![
            ("flow", self.arch_hash.clone(), &self.model.params),
            ("vae", self.vae_arch_hash.clone(), &self.vae.params),
        ]
    }

    fn trainable_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.model.params, &mut self.vae.params]
    }

    fn loss_grads(&self, items: &[usize], rng: &mut Rng) -> Result<(f64, Vec<Grads>)> {
        let window: Vec<Tensor> = (0..4)
            .map(|j| {
                Tensor::stack(
                    &items
                        .iter()
                        .map(|&i| {
                            let (tr, o) = self.windows[i];
                            self.pixels[tr][o + j].clone()
                        })
                        .collect::<Vec<_>>(),
                )
            })
            .collect::<Result<_>>()?;
        let a = &self.vae.arch;
        let s = window[0].shape();
        let eps = rng.normal_tensor(&[4 * s[0], a.latent_channels, s[2] / a.factor, s[3] / a.factor]);
        let mut g = Graph::new();
        let vars = finetune_loss(
            &self.model,
            &self.vae,
            &self.spec,
            &mut g,
            &window,
            &eps,
            self.beta,
            self.lambda,
            rng,
            (self.t_sampler, self.k_sampler),
        )?;
        g.backward(vars.total)?;
        Ok((
            g.value(vars.total).item(),
            vec![g.param_grads(&self.model.params), g.param_grads(&self.vae.params)],
        ))
    }

    fn validate(&self) -> Result<f64> {
        one_step_l2re(&self.model, &self.spec, &self.vae, &self.norm, &self.valid_cases()?, self.valid_ode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FmtArch;
    use crate::vae::VaeArch;

    fn schedule(steps: usize) -> Schedule {
        Schedule {
            steps,
            batch: 4,
            micro_batch: 2,
            log_interval: 2,
            checkpoint_interval: 4,
            seed: 11,
        }
    }

    fn opt() -> AdamWConfig {
        AdamWConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 0.0,
            warmup_frac: 0.1,
        }
    }

    fn vae_task() -> VaeTask {
        let mut rng = Rng::new(3);
        let arch = VaeArch {
            channels: 1,
            latent_channels: 2,
            width: 4,
            factor: 4,
        };
        let data: Vec<Tensor> = (0..10).map(|_| rng.normal_tensor(&[1, 8, 8])).collect();
        VaeTask {
            vae: Vae::new(arch, &mut rng).unwrap(),
            arch_hash: "v".into(),
            beta: 1e-3,
            train: data[..8].to_vec(),
            valid: data[8..].to_vec(),
        }
    }

    #[test]
    fn epoch_permutation_covers_examples() {
        let t = Trainer::new(vae_task(), schedule(10), &[opt()], RunFiles::in_memory(), 1).unwrap();
        let mut seen: Vec<usize> = (0..2).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0), t.batch_indices(2));
    }

    #[test]
    fn same_seed_same_curve_any_thread_count() {
        let mut a = Trainer::new(vae_task(), schedule(6), &[opt()], RunFiles::in_memory(), 1).unwrap();
        let mut b = Trainer::new(vae_task(), schedule(6), &[opt()], RunFiles::in_memory(), 3).unwrap();
        a.run().unwrap();
        b.run().unwrap();
        let la: Vec<f64> = a.metrics.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.metrics.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
        assert_eq!(la.len(), 3);
        assert_eq!(a.task.vae.params, b.task.vae.params);
    }

    #[test]
    fn resume_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let files = RunFiles::at(dir.path(), "h");
        let mut full = Trainer::new(vae_task(), schedule(8), &[opt()], RunFiles::in_memory(), 1).unwrap();
        full.run().unwrap();
        let mut first = Trainer::new(vae_task(), schedule(8), &[opt()], files.clone(), 1).unwrap();
        first.run_until(4).unwrap();
        let ckpt = Checkpoint::load(&files.checkpoint().unwrap()).unwrap();
        let mut second = Trainer::new(vae_task(), schedule(8), &[opt()], files.clone(), 1).unwrap();
        second.resume(&ckpt).unwrap();
        second.run().unwrap();
        assert_eq!(second.task.vae.params, full.task.vae.params);
        let csv = std::fs::read_to_string(files.metrics().unwrap()).unwrap();
        let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(losses, full.metrics.iter().map(|r| r.loss).collect::<Vec<_>>());
    }

    fn flow_and_vae() -> (FlowModel, Vae) {
        let mut rng = Rng::new(5);
        let mut model = FlowModel::new(
            FmtArch {
                latent_channels: 2,
                width: 4,
                blocks: 1,
                hidden: 4,
                time_dim: 4,
            },
            &mut rng,
        )
        .unwrap();
        model.params.jitter(&mut rng, 0.1);
        let vae = Vae::new(
            VaeArch {
                channels: 1,
                latent_channels: 2,
                width: 4,
                factor: 4,
            },
            &mut rng,
        )
        .unwrap();
        (model, vae)
    }

    #[test]
    fn finetune_encoder_gradient_is_vae_gradient() {
        let (model, vae) = flow_and_vae();
        let spec = PyramidSpec { factors: [2, 1, 1, 1] };
        let mut rng = Rng::new(8);
        let window: Vec<Tensor> = (0..4).map(|_| rng.normal_tensor(&[2, 1, 16, 16])).collect();
        let eps = rng.normal_tensor(&[8, 2, 4, 4]);
        let samplers = (Sampler01::Uniform, Sampler01::Uniform);
        let mut g = Graph::new();
        let v = finetune_loss(&model, &vae, &spec, &mut g, &window, &eps, 1e-3, 1.0, &mut Rng::new(1), samplers).unwrap();
        g.backward(v.total).unwrap();
        let joint = g.param_grads(&vae.params);
        assert!(g.param_grads(&model.params).norm() > 0.0);

        let all = Tensor::stack(&window.iter().flat_map(|w| w.unstack()).collect::<Vec<_>>()).unwrap();
        let mut g2 = Graph::new();
        let vars = vae.loss_graph(&mut g2, &all, &eps, 1e-3).unwrap();
        g2.backward(vars.total).unwrap();
        assert_eq!(joint, g2.param_grads(&vae.params));

        let mut g3 = Graph::new();
        let v0 = finetune_loss(&model, &vae, &spec, &mut g3, &window, &eps, 1e-3, 0.0, &mut Rng::new(1), samplers).unwrap();
        assert_eq!(g3.value(v0.total).item(), g3.value(v0.cfm).item());
    }
}
