//! Operator baseline vs flow marching rollout on a config, three seeds.

use std::time::Instant;

use flowmarch::analysis::empirical_rollout_compare;
use flowmarch::config::Config;
use flowmarch::model::Sampler01;
use flowmarch::pipeline::{evaluate_rollout, fmt_budget, train_fmt, train_vae, Prepared};
use flowmarch::sampler::{Integrator, OdeConfig};
use flowmarch::train::RunFiles;

fn main() -> flowmarch::Result<()> {
    let path = std::env::args().nth(1).expect("config path");
    let cfg = Config::load(std::path::Path::new(&path))?;
    let t0 = Instant::now();
    let data = Prepared::generate(&cfg)?;
    let vae = train_vae(&cfg, &data, RunFiles::in_memory(), 1)?;
    eprintln!("vae {:.0}s valid {:?}", t0.elapsed().as_secs_f64(), vae.validation.last());
    let vae = vae.task.vae;
    let test = &data.test()[..cfg.sample.rollout_trajectories.min(data.test().len())];
    for seed in 0..3u64 {
        let mut fm_cfg = cfg.clone();
        fm_cfg.fmt.seed = cfg.fmt.seed + seed;
        let mut op_cfg = fm_cfg.clone();
        op_cfg.fmt.t_sampler = Sampler01::Fixed(0.0);
        op_cfg.fmt.k_sampler = Sampler01::Fixed(1.0);
        let t = Instant::now();
        let fm = train_fmt(&fm_cfg, &data, &vae, RunFiles::in_memory(), 1)?;
        let op = train_fmt(&op_cfg, &data, &vae, RunFiles::in_memory(), 1)?;
        eprintln!("seed {seed} train {:.0}s fm valid {:?} op valid {:?}", t.elapsed().as_secs_f64(), fm.validation.last(), op.validation.last());
        let spec = cfg.pyramid();
        let t = Instant::now();
        let fm_r = evaluate_rollout(&fm.task.model, &spec, &vae, &data.norm, test, cfg.sample.horizon,
            &Integrator::Ode(OdeConfig { steps: cfg.sample.steps }), 0)?;
        let op_r = evaluate_rollout(&op.task.model, &spec, &vae, &data.norm, test, cfg.sample.horizon,
            &Integrator::Ode(OdeConfig { steps: 1 }), 0)?;
        let cmp = empirical_rollout_compare(&op_r, &fmt_budget(&op_cfg, &op.task.model, &data)?, &fm_r, &fmt_budget(&fm_cfg, &fm.task.model, &data)?)?;
        eprintln!("seed {seed} rollout {:.0}s", t.elapsed().as_secs_f64());
        eprintln!("  op {:?}", op_r.l2re);
        eprintln!("  fm {:?}", fm_r.l2re);
        eprintln!("  ratio {:.3} pass {}", cmp.ratio, cmp.pass);
    }
    Ok(())
}
