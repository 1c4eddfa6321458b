use std::time::Instant;

use flowmarch::config::Config;
use flowmarch::model::Sampler01;
use flowmarch::pipeline::{evaluate_rollout, train_fmt, train_vae, Prepared};
use flowmarch::sampler::{Integrator, OdeConfig};
use flowmarch::train::RunFiles;

fn main() -> flowmarch::Result<()> {
    let path = std::env::args().nth(1).expect("config path");
    let cfg = Config::load(std::path::Path::new(&path))?;
    let data = Prepared::generate(&cfg)?;
    let vae = train_vae(&cfg, &data, RunFiles::in_memory(), 1)?.task.vae;
    let test = &data.test()[..cfg.sample.rollout_trajectories.min(data.test().len())];
    let spec = cfg.pyramid();
    let variants = [
        ("fm", Sampler01::Uniform, Sampler01::Uniform),
        ("k1", Sampler01::Uniform, Sampler01::Fixed(1.0)),
        ("op", Sampler01::Fixed(0.0), Sampler01::Fixed(1.0)),
    ];
    let only: Vec<String> = std::env::args().skip(2).collect();
    for (name, ts, ks) in variants {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let mut c = cfg.clone();
        c.fmt.t_sampler = ts;
        c.fmt.k_sampler = ks;
        let t = Instant::now();
        let m = train_fmt(&c, &data, &vae, RunFiles::in_memory(), 1)?;
        eprintln!("{name} train {:.0}s valid {:?}", t.elapsed().as_secs_f64(), m.validation);
        for n in [1usize, 10, 100] {
            let r = evaluate_rollout(&m.task.model, &spec, &vae, &data.norm, test, cfg.sample.horizon,
                &Integrator::Ode(OdeConfig { steps: n }), 0)?;
            eprintln!("  {name} N={n} first {:.4} last {:.4}", r.l2re[0], r.l2re.last().unwrap());
        }
    }
    Ok(())
}
