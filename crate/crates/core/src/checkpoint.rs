//! On-disk checkpoints: a binary parameter container next to a JSON
//! manifest that carries everything needed to rebuild the model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GraphFnp, ModelConfig};
use crate::trainer::{CheckpointSink, TrainConfig};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "checkpoint.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: TrainConfig,
    /// sha256 of the config rendered as TOML.
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub seed: u64,
    /// Completed epochs; 0 for an untrained model.
    pub epoch: usize,
    pub class_of: Vec<usize>,
    pub params_sha256: String,
    pub dataset_fingerprint: Option<String>,
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml_string().as_bytes()))
}

/// Writes `dir/params.bin` and `dir/checkpoint.json`, creating `dir`.
pub fn save_checkpoint(dir: &Path, model: &GraphFnp, cfg: &TrainConfig, epoch: usize, dataset_fingerprint: Option<&str>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    model.params.write_to(&mut bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, &bytes).map_err(|e| Error::io(&params_path, e))?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        config_hash: config_hash(cfg),
        model_config: model.config.clone(),
        seed: cfg.seed,
        epoch,
        class_of: model.rationales.class_of.clone(),
        params_sha256: hex::encode(Sha256::digest(&bytes)),
        dataset_fingerprint: dataset_fingerprint.map(str::to_owned),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(dir.to_path_buf())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version)));
    }
    if config_hash(&manifest.config) != manifest.config_hash {
        return Err(Error::Checkpoint("stored config does not match its hash".into()));
    }
    Ok(manifest)
}

/// Rebuilds the model skeleton from the manifest, then overwrites every
/// parameter from the container after checking its digest.
pub fn load_checkpoint(dir: &Path) -> Result<(GraphFnp, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.params_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match the manifest digest", params_path.display())));
    }
    let mut model = GraphFnp::new(manifest.model_config.clone(), manifest.seed)?;
    if model.rationales.class_of != manifest.class_of {
        return Err(Error::Checkpoint("rationale class assignment differs from the manifest".into()));
    }
    model.params.read_from(bytes.as_slice())?;
    Ok((model, manifest))
}

/// Writes `root/epoch_NNNN` after every epoch and `root/best` on every new
/// best validation accuracy.
pub struct DirectorySink {
    pub root: PathBuf,
    pub config: TrainConfig,
    pub dataset_fingerprint: Option<String>,
    pub saved: Vec<PathBuf>,
}

impl DirectorySink {
    pub fn new(root: impl Into<PathBuf>, config: &TrainConfig, dataset_fingerprint: Option<String>) -> Self {
        DirectorySink {
            root: root.into(),
            config: config.clone(),
            dataset_fingerprint,
            saved: Vec::new(),
        }
    }

    pub fn epoch_dir(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("epoch_{epoch:04}"))
    }

    pub fn best_dir(&self) -> PathBuf {
        self.root.join("best")
    }
}

impl CheckpointSink for DirectorySink {
    fn save(&mut self, model: &GraphFnp, epoch: usize) -> Result<Option<PathBuf>> {
        let dir = self.epoch_dir(epoch);
        save_checkpoint(&dir, model, &self.config, epoch, self.dataset_fingerprint.as_deref())?;
        self.saved.push(dir.clone());
        Ok(Some(dir))
    }

    fn save_best(&mut self, model: &GraphFnp, epoch: usize) -> Result<()> {
        save_checkpoint(&self.best_dir(), model, &self.config, epoch, self.dataset_fingerprint.as_deref())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fnp::predict_distribution;
    use crate::graph::generate_ba_motif_dataset;
    use crate::nn::ParamGroup;

    fn tiny() -> (crate::graph::Dataset, TrainConfig) {
        let ds = generate_ba_motif_dataset(6, (6, 7), 1).unwrap();
        let cfg = TrainConfig {
            latent_dim: 4,
            hidden_dim: 6,
            rationale_dim: 3,
            rationales_per_class: 1,
            decoder_hidden_dim: 6,
            seed: 17,
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (ds, cfg) = tiny();
        let mut model = GraphFnp::new(cfg.model_config(&ds), cfg.seed).unwrap();
        // Move away from the initialization so the load really overwrites.
        for id in model.params.ids_in(&ParamGroup::ALL) {
            model.params.value_mut(id).mapv_inplace(|x| x * 0.5 + 0.01);
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &cfg, 3, Some("abc")).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert!(loaded.params.same_values(&model.params, &ParamGroup::ALL));
        assert_eq!(manifest.epoch, 3);
        assert_eq!(manifest.config, cfg);
        assert_eq!(manifest.dataset_fingerprint.as_deref(), Some("abc"));
        let a = predict_distribution(&model, &ds.graphs[0], 3, 1).unwrap();
        let b = predict_distribution(&loaded, &ds.graphs[0], 3, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampering_is_detected() {
        let (ds, cfg) = tiny();
        let model = GraphFnp::new(cfg.model_config(&ds), cfg.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &cfg, 0, None).unwrap();

        let params = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&params).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&params, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

        save_checkpoint(dir.path(), &model, &cfg, 0, None).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"epochs\": 40", "\"epochs\": 41");
        fs::write(&path, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");

        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn directory_sink_layout() {
        let (ds, cfg) = tiny();
        let model = GraphFnp::new(cfg.model_config(&ds), cfg.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut sink = DirectorySink::new(dir.path(), &cfg, None);
        assert_eq!(sink.save(&model, 2).unwrap(), Some(dir.path().join("epoch_0002")));
        sink.save_best(&model, 2).unwrap();
        assert!(dir.path().join("epoch_0002").join(PARAMS_FILE).exists());
        assert_eq!(read_manifest(&sink.best_dir()).unwrap().epoch, 2);
    }
}
