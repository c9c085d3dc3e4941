//! Sectioned TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::InjectionConfig;
use crate::error::{Error, Result};
use crate::optim::SgdConfig;
use crate::transfer::TransferConfig;

/// Environment variable naming the dataset root.
pub const DATA_ROOT_ENV: &str = "LBD_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "digit".into(),
            seed: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// MNIST directory; empty means `$LBD_DATA_ROOT` or `data/mnist`.
    pub root: PathBuf,
    /// Cap on training images (0 keeps all).
    pub train_limit: usize,
    /// Original label of the target class y_t.
    pub target_label: usize,
    /// |X_t|.
    pub target_count: usize,
    pub eval_count: usize,
    pub synthetic_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Mnist,
            root: PathBuf::new(),
            train_limit: 0,
            target_label: 6,
            target_count: 45,
            eval_count: 5000,
            synthetic_per_class: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerSection {
    /// Side of the bottom-right square; 0 picks 4% of the image area.
    pub mask_side: usize,
    /// K_t.
    pub inject_layer: usize,
}

impl Default for TriggerSection {
    fn default() -> Self {
        TriggerSection {
            mask_side: 0,
            inject_layer: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub prune_layer: usize,
    pub prune_fractions: Vec<f64>,
    pub blur_kernels: Vec<usize>,
    pub frozen_counts: Vec<usize>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            prune_layer: 3,
            prune_fractions: (0..20).map(|i| i as f64 / 20.0).collect(),
            blur_kernels: vec![1, 3, 5, 7, 9],
            frozen_counts: vec![0, 1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub teacher: SgdConfig,
    pub trigger: TriggerSection,
    pub attack: InjectionConfig,
    pub transfer: TransferConfig,
    pub defense: DefenseSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.target_count == 0 || d.eval_count == 0 {
            return Err(Error::Config(
                "target_count and eval_count must be positive".into(),
            ));
        }
        if d.source == DataSource::Synthetic && d.synthetic_per_class == 0 {
            return Err(Error::Config("synthetic_per_class must be positive".into()));
        }
        if self.trigger.inject_layer == 0 {
            return Err(Error::Config("inject_layer is 1-based".into()));
        }
        for &f in &self.defense.prune_fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::FractionOutOfRange(f));
            }
        }
        for &k in &self.defense.blur_kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::EvenKernelSize(k));
            }
        }
        self.teacher.validate()?;
        self.attack.validate()?;
        self.transfer.validate()?;
        if self.transfer.frozen_layers < self.trigger.inject_layer {
            log::warn!(
                "K={} < K_t={}: the backdoor is not expected to survive transfer",
                self.transfer.frozen_layers,
                self.trigger.inject_layer
            );
        }
        Ok(())
    }

    /// Dataset directory: the config value, else `$LBD_DATA_ROOT`, else
    /// `data/mnist`.
    pub fn data_root(&self) -> PathBuf {
        if !self.data.root.as_os_str().is_empty() {
            return self.data.root.clone();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("data/mnist"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("[attack.retrain]"));
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[data]\ntarget_count = 1\n\n[transfer]\nfrozen_layers = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.data.target_count, 1);
        assert_eq!(cfg.transfer.frozen_layers, 2);
        assert_eq!(cfg.teacher, SgdConfig::default());
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = ExperimentConfig::from_toml("[data]\ntargets = 3\n").unwrap_err();
        assert_eq!(err.family(), crate::ErrorFamily::Config);
        let err = ExperimentConfig::from_toml("[defense]\nblur_kernels = [2]\n").unwrap_err();
        assert!(matches!(err, Error::EvenKernelSize(2)));
    }

    #[test]
    fn explicit_root_wins() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.root = PathBuf::from("/x/y");
        assert_eq!(cfg.data_root(), PathBuf::from("/x/y"));
    }
}
