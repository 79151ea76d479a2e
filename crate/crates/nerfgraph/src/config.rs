//! Run configuration: one JSON document driving the whole pipeline.
//! Unknown keys are rejected; every tunable lives under a named section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::FitConfig;
use crate::downstream::{ClassifierConfig, DistanceMetric};
use crate::fields::preset;
use crate::gmn::EncoderConfig;
use crate::training::{LossMode, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_scenes: usize,
    pub classes: Vec<String>,
    pub views: usize,
    pub image_size: usize,
    pub camera_distance: f64,
    pub splits: [f64; 3],
    /// Architecture preset set: "desk" or "paper".
    pub arch_set: String,
    pub families: Vec<String>,
    /// Unseen-architecture presets fitted when `gen --unseen-variants`.
    pub variants: Vec<String>,
    pub save_gt_pngs: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_scenes: 60,
            classes: crate::scenes::DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            views: 24,
            image_size: 64,
            camera_distance: 2.8,
            splits: [0.8, 0.1, 0.1],
            arch_set: "desk".into(),
            families: vec!["MLP".into(), "TRI".into(), "HASH".into()],
            variants: vec!["MLP-1L".into(), "TRI-16H".into(), "HASH-3N".into()],
            save_gt_pngs: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub ks: Vec<usize>,
    pub metric: DistanceMetric,
    /// Scene split evaluated: "all", "train", "val" or "test".
    pub split: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10], metric: DistanceMetric::Euclidean, split: "all".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub nerf_fit: FitConfig,
    #[serde(default)]
    pub framework: TrainConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::io(path))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.classes.len() < 2 {
            return Err(Error::Config("data.classes needs at least 2 entries".into()));
        }
        if self.data.families.is_empty() {
            return Err(Error::Config("data.families must not be empty".into()));
        }
        for name in self.data.families.iter().chain(&self.data.variants) {
            if preset(&self.data.arch_set, name).is_none() {
                return Err(Error::Config(format!(
                    "unknown architecture preset {name:?} in set {:?}",
                    self.data.arch_set
                )));
            }
        }
        let sum: f64 = self.data.splits.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.splits must sum to 1, got {sum}")));
        }
        if self.framework.mode.uses_contrastive() && self.data.families.len() < 2 {
            return Err(Error::Config(
                "framework.mode c/rc needs a multi-architecture dataset (no positive pairs otherwise)".into(),
            ));
        }
        self.framework.validate()?;
        if self.retrieval.ks.is_empty() {
            return Err(Error::Config("retrieval.ks must not be empty".into()));
        }
        if !["all", "train", "val", "test"].contains(&self.retrieval.split.as_str()) {
            return Err(Error::Config(format!("unknown retrieval split {:?}", self.retrieval.split)));
        }
        Ok(())
    }

    /// The 60-scene, 4-class, 3-family configuration the evaluation suite
    /// runs end to end on one CPU.
    pub fn desk60(out_dir: &Path) -> Self {
        Self {
            seed: 60601,
            paths: PathsConfig { out_dir: out_dir.to_path_buf() },
            data: DataConfig::default(),
            nerf_fit: FitConfig::default(),
            framework: TrainConfig {
                mode: LossMode::RC,
                epochs: 60,
                batch_size: 8,
                max_lr: 3e-4,
                weight_decay: 1e-2,
                lambda: 2e-2,
                rays_per_nerf: 128,
                samples_per_ray: 24,
                w_fg: 0.8,
                w_bg: 0.2,
                val_every_epochs: 10,
                encoder: EncoderConfig::desk(),
                decoder_hidden_dim: 256,
                decoder_hidden_layers: 4,
                decoder_freq_dim: 144,
                decoder_skip_into_layer: 2,
            },
            classifier: ClassifierConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }

    /// Small smoke configuration: minutes end to end, used by determinism
    /// and CLI tests.
    pub fn tiny(out_dir: &Path) -> Self {
        Self {
            seed: 7321,
            paths: PathsConfig { out_dir: out_dir.to_path_buf() },
            data: DataConfig {
                num_scenes: 8,
                classes: vec!["sphere".into(), "box".into()],
                views: 8,
                image_size: 24,
                camera_distance: 2.8,
                splits: [0.5, 0.25, 0.25],
                arch_set: "desk".into(),
                families: vec!["MLP".into(), "TRI".into(), "HASH".into()],
                variants: vec!["MLP-1L".into()],
                save_gt_pngs: true,
            },
            nerf_fit: FitConfig {
                steps: 60,
                rays_per_step: 64,
                samples_per_ray: 8,
                psnr_gate_db: 0.0,
                ..Default::default()
            },
            framework: TrainConfig {
                mode: LossMode::RC,
                epochs: 2,
                batch_size: 4,
                max_lr: 1e-3,
                weight_decay: 1e-2,
                lambda: 2e-2,
                rays_per_nerf: 24,
                samples_per_ray: 8,
                w_fg: 0.8,
                w_bg: 0.2,
                val_every_epochs: 1,
                encoder: EncoderConfig { hidden_dim: 16, num_layers: 2, readout_layers: 2, embed_dim: 24, directed: true },
                decoder_hidden_dim: 32,
                decoder_hidden_layers: 3,
                decoder_freq_dim: 36,
                decoder_skip_into_layer: 2,
            },
            classifier: ClassifierConfig { epochs: 30, batch_size: 64, ..Default::default() },
            retrieval: RetrievalConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_presets_validate() {
        let dir = std::path::Path::new("/tmp/x");
        RunConfig::desk60(dir).validate().unwrap();
        RunConfig::tiny(dir).validate().unwrap();
    }

    #[test]
    fn test_unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut v: serde_json::Value =
            serde_json::to_value(RunConfig::tiny(dir.path())).unwrap();
        v["data"]["not_a_key"] = serde_json::json!(1);
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn test_roundtrip_and_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let cfg = RunConfig::desk60(dir.path());
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, cfg);

        let mut bad = cfg.clone();
        bad.data.splits = [0.5, 0.2, 0.2];
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.data.families = vec!["NOPE".into()];
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.data.families = vec!["MLP".into()];
        assert!(bad.validate().is_err()); // rc mode on single family
    }
}
