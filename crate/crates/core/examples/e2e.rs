use std::time::Instant;

use flowmarch::config::Config;
use flowmarch::pipeline::{train_fmt, train_vae, Prepared};
use flowmarch::train::RunFiles;

fn main() -> flowmarch::Result<()> {
    let path = std::env::args().nth(1).expect("config path");
    let cfg = Config::load(std::path::Path::new(&path))?;
    let t0 = Instant::now();
    let data = Prepared::generate(&cfg)?;
    eprintln!("data {:.1}s norm {:?}", t0.elapsed().as_secs_f64(), data.norm);
    let t1 = Instant::now();
    let vae = train_vae(&cfg, &data, RunFiles::in_memory(), 1)?;
    eprintln!("vae {:.1}s", t1.elapsed().as_secs_f64());
    for r in &vae.metrics { eprintln!("  vae step {} loss {:.4e}", r.step, r.loss); }
    eprintln!("  vae valid {:?}", vae.validation);
    let t2 = Instant::now();
    let fmt = train_fmt(&cfg, &data, &vae.task.vae, RunFiles::in_memory(), 1)?;
    eprintln!("fmt {:.1}s", t2.elapsed().as_secs_f64());
    for r in &fmt.metrics { eprintln!("  fmt step {} loss {:.4e}", r.step, r.loss); }
    eprintln!("  fmt valid {:?}", fmt.validation);
    Ok(())
}
