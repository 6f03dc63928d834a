//! Run configuration: one TOML document with a default for every key.

use std::path::{Path, PathBuf};

use fuseg_core::data::{AugConfig, SynthSpec, DEFAULT_IGNORE_INDEX};
use fuseg_core::losses::FusionLossConfig;
use fuseg_core::model::ModelConfig;
use fuseg_core::scheduler::{RoundPlan, TrainSettings, WeightingConfig};
use fuseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// File name of the effective-config snapshot in every output directory.
pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding one directory per split.
    pub root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub num_classes: usize,
    pub ignore_index: u16,
    pub augment: AugConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            num_classes: 4,
            ignore_index: DEFAULT_IGNORE_INDEX,
            augment: AugConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.root.join(split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub scene: SynthSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_count: 16,
            val_count: 4,
            scene: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Split scored by `eval` when no dataset directory is given.
    pub split: String,
    pub fusion_csv: String,
    pub segmentation_csv: String,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            split: "val".into(),
            fusion_csv: "fusion_metrics.csv".into(),
            segmentation_csv: "segmentation_metrics.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub loss: FusionLossConfig,
    pub weighting: WeightingConfig,
    pub plan: RoundPlan,
    pub metrics: MetricsConfig,
}

impl Config {
    /// The small CPU profile: two short rounds on the synthetic set with
    /// narrow fusion extractors, no augmentation and a fusion-leaning task
    /// preference.
    pub fn desk() -> Self {
        let mut cfg = Self {
            plan: RoundPlan::desk(),
            ..Self::default()
        };
        cfg.data.augment.enabled = false;
        cfg.weighting.epoch_iters = 20;
        cfg.weighting.eta_pref = vec![1.0, 0.1];
        cfg.model.fusion.base_channels = 16;
        cfg.model.fusion.growth = 8;
        cfg.model.fusion.decoder_width = 16;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("every config value has a TOML form")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    /// Overrides the training seed and the synthetic-scene seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.scene.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.settings().validate()?;
        if self.data.num_classes != self.model.seg.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes = {} but model.seg.num_classes = {}",
                self.data.num_classes, self.model.seg.num_classes
            )));
        }
        if self.synth.scene.num_classes != self.data.num_classes {
            return Err(Error::Config(
                "synth.scene.num_classes must equal data.num_classes".into(),
            ));
        }
        if (self.data.ignore_index as usize) < self.data.num_classes {
            return Err(Error::Config("data.ignore_index collides with a class id".into()));
        }
        self.synth.scene.validate()?;
        for (key, split) in [
            ("data.train_split", &self.data.train_split),
            ("data.val_split", &self.data.val_split),
            ("metrics.split", &self.metrics.split),
        ] {
            if split.is_empty() || split.contains(['/', '\\']) || split == ".." {
                return Err(Error::Config(format!("{key} must be a plain directory name")));
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            plan: self.plan.clone(),
            weighting: self.weighting.clone(),
            loss: self.loss.clone(),
            augment: self.data.augment.clone(),
            ignore_index: self.data.ignore_index,
            seed: self.seed,
        }
    }

    /// Snapshot stored in checkpoints.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("every config value has a JSON form")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let cfg: Self =
            serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        Config::desk().validate().unwrap();
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn toml_round_trips() {
        for cfg in [Config::default(), Config::desk().with_seed(9)] {
            assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
            assert_eq!(Config::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "sede = 1",
            "[plan]\nroundz = 3",
            "[model.fusion.hia]\nhead = 2",
            "[extra]",
        ] {
            assert!(matches!(Config::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = Config::from_toml("seed = 5\n[plan]\nrounds = 3\n[weighting]\nstrategy = \"uniform\"").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.plan.rounds, 3);
        assert_eq!(cfg.plan.seg_iters, RoundPlan::default().seg_iters);
        assert_eq!(cfg.weighting.temperature, 2.0);
    }

    #[test]
    fn inconsistent_class_counts_are_rejected() {
        let mut cfg = Config::default();
        cfg.data.num_classes = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = Config::default();
        cfg.metrics.split = "../x".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_reaches_the_generator() {
        let cfg = Config::default().with_seed(77);
        assert_eq!((cfg.seed, cfg.synth.scene.seed), (77, 77));
    }

    #[test]
    fn shipped_profiles_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(Config::load(&dir.join("desk.toml")).unwrap(), Config::desk());
        assert_eq!(Config::load(&dir.join("full.toml")).unwrap(), Config::default());
    }
}
