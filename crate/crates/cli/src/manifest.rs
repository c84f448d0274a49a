use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use graphfnp::checkpoint::config_hash;
use graphfnp::TrainConfig;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<TrainConfig>,
    pub config_hash: Option<String>,
    pub dataset_fingerprint: Option<String>,
    pub seed: u64,
    pub ablation: Vec<String>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub metric_paths: Vec<PathBuf>,
    pub output_paths: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&TrainConfig>, seed: u64, started_unix: u64) -> Self {
        RunManifest {
            command: command.to_owned(),
            config: config.cloned(),
            config_hash: config.map(config_hash),
            dataset_fingerprint: None,
            seed,
            ablation: config.map(|c| c.ablation.iter().map(|a| a.to_string()).collect()).unwrap_or_default(),
            checkpoint_paths: Vec::new(),
            metric_paths: Vec::new(),
            output_paths: Vec::new(),
            started_unix,
            finished_unix: 0,
        }
    }

    /// Refuses to write a manifest that points at missing files.
    pub fn write(mut self, out: &Path) -> anyhow::Result<PathBuf> {
        for p in self.checkpoint_paths.iter().chain(&self.metric_paths).chain(&self.output_paths) {
            if !p.exists() {
                bail!("manifest references missing path {}", p.display());
            }
        }
        self.finished_unix = unix_now();
        let path = out.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
