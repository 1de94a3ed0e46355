use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.toml";

/// Record written last by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub baseline: String,
    pub deterministic: bool,
    /// Omitted in deterministic mode so reruns are byte-identical.
    pub created_unix: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Tracks a stage's files and writes its manifest.
pub struct Stage {
    pub dir: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Stage {
    /// Prepares `dir`, refusing a non-empty directory unless `force` is set.
    pub fn create(dir: PathBuf, command: &str, force: bool) -> Result<Self> {
        if dir.exists() {
            let occupied = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(true);
            if occupied {
                if !force {
                    bail!("{} already exists; pass --force to overwrite", dir.display());
                }
                fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
            }
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, command: command.to_owned(), inputs: BTreeMap::new(), outputs: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn finish(self, cfg: &RunConfig) -> Result<RunManifest> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let name = p.strip_prefix(&self.dir).unwrap_or(p).display().to_string();
            outputs.insert(name, sha256_file(p)?);
        }
        let created_unix = (!cfg.deterministic)
            .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
        let manifest = RunManifest {
            tool: "nucparc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            seed: cfg.seed,
            baseline: cfg.baseline.as_str().into(),
            deterministic: cfg.deterministic,
            created_unix,
            inputs: self.inputs,
            outputs,
            config: cfg.clone(),
        };
        let path = self.dir.join(MANIFEST);
        fs::write(&path, toml::to_string(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}
