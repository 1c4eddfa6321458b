//! The `flowmarch` command line: one subcommand per pipeline stage, each
//! writing into its own run directory with a `manifest.json`.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use flowmarch::pde::System;

#[derive(Debug, Parser)]
#[command(name = "flowmarch", version, about = "Flow-marching PDE surrogates on toy systems")]
pub struct Cli {
    /// Worker threads for micro-batch gradients; results do not depend on it.
    #[arg(long, global = true, env = "FLOWMARCH_THREADS", default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_system(s: &str) -> Result<System, String> {
    s.parse().map_err(|e: flowmarch::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate trajectories and write data.fmds with its data.json sidecar.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Override data.system.
        #[arg(long, value_parser = parse_system)]
        system: Option<System>,
        /// Replace an existing dataset in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the autoencoder; resumes from the run directory when the config matches.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stop after this many optimizer steps; a later call resumes.
        #[arg(long)]
        until: Option<usize>,
        /// Discard a previous run with a different config.
        #[arg(long)]
        force: bool,
    },
    /// Train the flow model against a frozen autoencoder, or finetune both.
    TrainFmt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding the autoencoder.
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Joint finetune of a pretrained flow model and its autoencoder.
        #[arg(long, requires = "init")]
        finetune: bool,
        /// Pretrained fmt checkpoint to finetune from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        until: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Autoregressive rollout on the test split; writes rollout.csv.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Single Euler step from t = 0, the residual-operator form.
        #[arg(long)]
        operator: bool,
        /// Override sample.eta.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Ensemble forecast and the k3 / eta variance sweeps.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        trajectory: usize,
    },
    /// Run the numerical verification suite; writes verify.json.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// 0 success, 1 usage or configuration, 2 numeric failure, 3 I/O.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<flowmarch::Error>() {
            return e.exit_code();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<commands::Failed>().is_some() {
            return 2;
        }
    }
    1
}
