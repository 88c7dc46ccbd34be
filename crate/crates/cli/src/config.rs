//! Experiment configuration: TOML file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlnlab::nn::arch::Architecture;
use tlnlab::pretrain::desk_pretrain_config;
use tlnlab::sweep::{InitMode, VariantSpec};
use tlnlab::tln::{parse_tln, NormScheme, DESK_SIZES, FULL_SIZES};
use tlnlab::train::{Budget, TrainConfig};

/// A configuration problem: bad file, bad value or missing input.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    #[default]
    Desk,
}

/// Budget and schedule choices before they are resolved against a dataset size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default)]
    pub preset: Preset,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub decay_factor: Option<f64>,
    pub step_epochs: Option<usize>,
    pub momentum: Option<f64>,
    pub augment: Option<bool>,
}

impl TrainSettings {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.iterations {
            cfg.budget.iterations = v;
        }
        if let Some(v) = self.batch_size {
            cfg.budget.batch_size = v;
        }
        if let Some(v) = self.base_lr {
            cfg.schedule.base_lr = v;
        }
        if let Some(v) = self.decay_factor {
            cfg.schedule.decay_factor = v;
        }
        if let Some(v) = self.step_epochs {
            cfg.schedule.step_epochs = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.augment {
            cfg.augment.enabled = v;
        }
        cfg
    }

    pub fn finetune(&self, train_len: usize) -> TrainConfig {
        self.apply(match self.preset {
            Preset::Full => TrainConfig::new(Budget::FULL),
            Preset::Desk => TrainConfig::new(Budget::desk(train_len)),
        })
    }

    pub fn pretrain(&self, source_len: usize) -> TrainConfig {
        self.apply(match self.preset {
            Preset::Full => TrainConfig::new(Budget::FULL),
            Preset::Desk => desk_pretrain_config(source_len),
        })
    }

    pub fn allowed_sizes(&self) -> Vec<usize> {
        match self.preset {
            Preset::Full => FULL_SIZES.to_vec(),
            Preset::Desk => DESK_SIZES.to_vec(),
        }
    }

    /// Fields set in `other` win.
    pub fn merge(&self, other: &TrainSettings, preset: Option<Preset>) -> TrainSettings {
        TrainSettings {
            preset: preset.unwrap_or(self.preset),
            iterations: other.iterations.or(self.iterations),
            batch_size: other.batch_size.or(self.batch_size),
            base_lr: other.base_lr.or(self.base_lr),
            decay_factor: other.decay_factor.or(self.decay_factor),
            step_epochs: other.step_epochs.or(self.step_epochs),
            momentum: other.momentum.or(self.momentum),
            augment: other.augment.or(self.augment),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantEntry {
    pub name: String,
    pub tln: String,
    #[serde(default)]
    pub sizes: Vec<usize>,
    pub norm: Option<String>,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub dropout: f64,
}

impl VariantEntry {
    pub fn resolve(&self) -> anyhow::Result<VariantSpec> {
        let notation = parse_tln(&self.tln)
            .map_err(|e| config_error(format!("variant `{}`: {e}", self.name)))?;
        let norm = match &self.norm {
            Some(n) => n
                .parse::<NormScheme>()
                .map_err(|e| config_error(format!("variant `{}`: {e}", self.name)))?,
            None => NormScheme::BatchStd,
        };
        Ok(VariantSpec {
            name: self.name.clone(),
            notation,
            sizes: self.sizes.clone(),
            norm,
            dropout: self.dropout,
            init: self.init,
        })
    }
}

/// The TOML experiment file. Relative paths are taken from the file's directory.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: Option<PathBuf>,
    #[serde(default)]
    pub targets: Vec<PathBuf>,
    pub chi: Option<PathBuf>,
    pub architecture: Option<Architecture>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub repeats: Option<usize>,
    pub split: Option<f64>,
    pub jobs: Option<usize>,
    pub nus: Option<Vec<usize>>,
    pub allowed_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub variants: Vec<VariantEntry>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.source.as_mut().map(fix);
        cfg.chi.as_mut().map(fix);
        cfg.out_dir.as_mut().map(fix);
        cfg.targets.iter_mut().for_each(fix);
        for v in &cfg.variants {
            v.resolve()?;
        }
        for p in cfg.source.iter().chain(&cfg.chi).chain(&cfg.targets) {
            if !p.exists() {
                return Err(config_error(format!(
                    "config references missing path {}",
                    p.display()
                )));
            }
        }
        Ok(cfg)
    }
}

/// An existing path made absolute, or a config error naming it.
pub fn existing(path: &Path) -> anyhow::Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_settings() {
        let file = TrainSettings {
            iterations: Some(10),
            base_lr: Some(0.1),
            ..Default::default()
        };
        let flags = TrainSettings {
            iterations: Some(3),
            ..Default::default()
        };
        let m = file.merge(&flags, Some(Preset::Full));
        assert_eq!(
            (m.iterations, m.base_lr, m.preset),
            (Some(3), Some(0.1), Preset::Full)
        );
        let cfg = m.finetune(100);
        assert_eq!(cfg.budget.iterations, 3);
        assert_eq!(cfg.budget.batch_size, 100);
    }

    #[test]
    fn bad_variant_is_a_config_error() {
        let v = VariantEntry {
            name: "x".into(),
            tln: "[chi]_N^".into(),
            sizes: vec![],
            norm: None,
            init: InitMode::Pretrained,
            dropout: 0.0,
        };
        let err = v.resolve().unwrap_err();
        assert!(err.is::<ConfigError>());
        assert!(err.to_string().contains("byte 8"), "{err}");
    }
}
