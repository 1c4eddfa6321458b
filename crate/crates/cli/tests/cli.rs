use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowmarch::pde::dataset::read_header;
use flowmarch_cli::manifest::{orphans, RunManifest};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn flowmarch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowmarch"))
        .args(args)
        .env_remove("FLOWMARCH_THREADS")
        .output()
        .expect("spawn flowmarch")
}

fn ok(args: &[&str]) -> Output {
    let out = flowmarch(args);
    assert!(
        out.status.success(),
        "flowmarch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn no_orphans(dir: &Path) -> RunManifest {
    let m = RunManifest::read(dir).unwrap();
    assert_eq!(orphans(dir, &m).unwrap(), Vec::<String>::new(), "{}", dir.display());
    for f in &m.outputs {
        assert!(dir.join(f).exists(), "{f} listed but missing");
    }
    m
}

fn loss_columns(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn gen_data_is_reproducible_and_refuses_collisions() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--config", s(&tiny()), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&tiny()), "--out", s(&b)]);
    let (ha, hb) = (read_header(&a.join("data.fmds")).unwrap(), read_header(&b.join("data.fmds")).unwrap());
    assert_eq!(ha.count, 10);
    assert_eq!(ha.checksum, hb.checksum);
    let m = no_orphans(&a);
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.metrics["trajectories"], 10.0);
    assert!(m.config["vae"]["optimizer"]["lr"].is_number(), "defaults are echoed");

    let again = flowmarch(&["gen-data", "--config", s(&tiny()), "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["gen-data", "--config", s(&tiny()), "--out", s(&a), "--force"]);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = flowmarch(&["gen-data", "--config", s(&tiny()), "--out", s(tmp.path()), "--system", "navier"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("{heat, advection, burgers}"));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[data]\nsystem = \"navier\"\n").unwrap();
    let out = flowmarch(&["gen-data", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(&bad, "[data]\nsides = 16\n").unwrap();
    let out = flowmarch(&["gen-data", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1), "unknown keys are rejected");

    assert_eq!(flowmarch(&["no-such-command"]).status.code(), Some(1));
    let missing = flowmarch(&["rollout", "--config", s(&tiny()), "--out", s(tmp.path()), "--data", "/nonexistent", "--ckpt", "x"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn config_hash_ignores_key_order_and_format() {
    let tmp = tempfile::tempdir().unwrap();
    let toml_a = tmp.path().join("a.toml");
    let toml_b = tmp.path().join("b.toml");
    let json = tmp.path().join("c.json");
    std::fs::write(&toml_a, "[data]\nside = 16\nseed = 5\n\n[vae]\nbeta = 0.01\n").unwrap();
    std::fs::write(&toml_b, "[vae]\nbeta    = 0.01\n[data]\nseed = 5\nside = 16\n").unwrap();
    std::fs::write(&json, r#"{"vae": {"beta": 0.01}, "data": {"seed": 5, "side": 16}}"#).unwrap();
    let mut hashes = Vec::new();
    for (i, c) in [&toml_a, &toml_b, &json].iter().enumerate() {
        let out = tmp.path().join(format!("v{i}"));
        // verify is the cheapest command that records the config hash.
        let cfg_out = flowmarch(&["verify", "--config", s(c), "--out", s(&out)]);
        assert!(cfg_out.status.code().is_some());
        hashes.push(RunManifest::read(&out).unwrap().config_hash);
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(hashes[0], hashes[2]);
}

#[test]
fn verify_passes_and_writes_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("verify");
    ok(&["verify", "--config", s(&tiny()), "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 10);
    let m = no_orphans(&out);
    assert_eq!(m.metrics["failed"], 0.0);
}

#[test]
fn full_pipeline_on_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let cfg = tiny();
    let c = s(&cfg);
    ok(&["gen-data", "--config", c, "--out", s(&p("data"))]);

    let no_vae = flowmarch(&["train-fmt", "--config", c, "--data", s(&p("data")), "--out", s(&p("fmt"))]);
    assert_eq!(no_vae.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_vae.stderr).contains("VAE"));
    let gone = flowmarch(&[
        "train-fmt", "--config", c, "--data", s(&p("data")), "--vae", s(&p("nope.ckpt")), "--out", s(&p("fmt")),
    ]);
    assert_eq!(gone.status.code(), Some(1));

    ok(&["train-vae", "--config", c, "--data", s(&p("data")), "--out", s(&p("vae"))]);
    let vae_m = no_orphans(&p("vae"));
    assert_eq!(vae_m.metrics["step"], 20.0);
    // 20 steps logged every 5.
    assert_eq!(std::fs::read_to_string(p("vae/metrics.csv")).unwrap().lines().count(), 1 + 4);
    assert!(vae_m.metrics["valid_l2re"].is_finite());

    let vae_ckpt = p("vae/checkpoint.ckpt");
    ok(&[
        "--threads", "2", "train-fmt", "--config", c, "--data", s(&p("data")), "--vae", s(&vae_ckpt), "--out", s(&p("fmt")),
    ]);
    no_orphans(&p("fmt"));
    let fmt_ckpt = p("fmt/checkpoint.ckpt");

    ok(&["rollout", "--config", c, "--data", s(&p("data")), "--ckpt", s(&fmt_ckpt), "--out", s(&p("roll"))]);
    let csv = std::fs::read_to_string(p("roll/rollout.csv")).unwrap();
    let rows = csv.lines().filter(|l| l.chars().next().is_some_and(|ch| ch.is_ascii_digit())).count();
    assert_eq!(rows, 4, "horizon 4 gives 4 metric rows");
    let roll_m = no_orphans(&p("roll"));
    assert_eq!(roll_m.metrics["steps"], 4.0);

    ok(&[
        "rollout", "--config", c, "--data", s(&p("data")), "--ckpt", s(&fmt_ckpt), "--out", s(&p("roll_op")), "--operator",
    ]);

    ok(&["ensemble", "--config", c, "--data", s(&p("data")), "--ckpt", s(&fmt_ckpt), "--out", s(&p("ens"))]);
    assert_eq!(read_header(&p("ens/members.fmds")).unwrap().count, 4);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("ens/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["members"], 4);
    assert_eq!(stats["k3_sweep"].as_array().unwrap().len(), 5);
    assert_eq!(std::fs::read_to_string(p("ens/eta_sweep.csv")).unwrap().lines().count(), 6);
    no_orphans(&p("ens"));

    // A VAE checkpoint has no flow section.
    let wrong = flowmarch(&["rollout", "--config", c, "--data", s(&p("data")), "--ckpt", s(&vae_ckpt), "--out", s(&p("x"))]);
    assert_eq!(wrong.status.code(), Some(1));

    // Architecture mismatch names both hashes.
    let wide = p("wide.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("width = 8", "width = 12");
    std::fs::write(&wide, text).unwrap();
    let mismatch =
        flowmarch(&["rollout", "--config", s(&wide), "--data", s(&p("data")), "--ckpt", s(&fmt_ckpt), "--out", s(&p("y"))]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("expected architecture"));

    // Finetune on a held-out system.
    ok(&["gen-data", "--config", c, "--system", "advection", "--out", s(&p("adv"))]);
    ok(&[
        "train-fmt", "--config", c, "--data", s(&p("adv")), "--finetune", "--init", s(&fmt_ckpt), "--out", s(&p("ft")),
    ]);
    no_orphans(&p("ft"));
    let ft = flowmarch::checkpoint::Checkpoint::load(&p("ft/checkpoint.ckpt")).unwrap();
    assert_eq!(ft.kind, "finetune");
    ok(&["rollout", "--config", c, "--data", s(&p("adv")), "--ckpt", s(&p("ft/checkpoint.ckpt")), "--out", s(&p("ftr"))]);
}

#[test]
fn interrupted_training_resumes_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let c = tiny();
    let c = s(&c);
    ok(&["gen-data", "--config", c, "--out", s(&p("data"))]);
    ok(&["train-vae", "--config", c, "--data", s(&p("data")), "--out", s(&p("full"))]);
    ok(&["train-vae", "--config", c, "--data", s(&p("data")), "--out", s(&p("split")), "--until", "10"]);
    assert_eq!(RunManifest::read(&p("split")).unwrap().metrics["step"], 10.0);
    let resumed = ok(&["train-vae", "--config", c, "--data", s(&p("data")), "--out", s(&p("split"))]);
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("resuming at step 10"));

    assert_eq!(loss_columns(&p("full/metrics.csv")), loss_columns(&p("split/metrics.csv")));
    assert_eq!(
        std::fs::read_to_string(p("full/valid.csv")).unwrap(),
        std::fs::read_to_string(p("split/valid.csv")).unwrap()
    );
    let (a, b) = (RunManifest::read(&p("full")).unwrap(), RunManifest::read(&p("split")).unwrap());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(
        std::fs::read(p("full/checkpoint.ckpt")).unwrap(),
        std::fs::read(p("split/checkpoint.ckpt")).unwrap()
    );

    // A different config refuses to reuse the directory unless forced.
    let other = p("other.toml");
    std::fs::write(&other, std::fs::read_to_string(tiny()).unwrap().replace("[vae]\n", "[vae]\nseed = 9\n")).unwrap();
    let refused = flowmarch(&["train-vae", "--config", s(&other), "--data", s(&p("data")), "--out", s(&p("split"))]);
    assert_eq!(refused.status.code(), Some(1));
    ok(&["train-vae", "--config", s(&other), "--data", s(&p("data")), "--out", s(&p("split")), "--force"]);
    assert_ne!(RunManifest::read(&p("split")).unwrap().config_hash, a.config_hash);
}
