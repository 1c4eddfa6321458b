use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

/// Record of one command invocation, written last into its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    /// `<package version>+<git rev>`, `nogit` outside a checkout.
    pub version: String,
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    /// Files in the directory produced by this run, relative names, sorted.
    pub outputs: Vec<String>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("FLOWMARCH_GIT_REV"))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Files in `dir` that the manifest does not list.
pub fn orphans(dir: &Path, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name != MANIFEST && !manifest.outputs.contains(&name) {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}
