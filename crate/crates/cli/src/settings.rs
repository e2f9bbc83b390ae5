use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qunet_core::trainer::TrainConfig;
use qunet_core::UNetConfig;

use crate::commands::CliError;

pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

/// Settings of a train/eval run. In a config file every field is optional;
/// after [`RunConfig::with_defaults`] only `data`, `out` and `bit_lr` may
/// remain unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bit_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub img_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_bitwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub float: Option<bool>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))
    }

    pub fn with_defaults(self) -> Self {
        let t = TrainConfig::default();
        let u = UNetConfig::default();
        Self {
            epochs: self.epochs.or(Some(t.epochs)),
            batch: self.batch.or(Some(t.batch_size)),
            lr: self.lr.or(Some(t.lr)),
            lambda: self.lambda.or(Some(t.lambda)),
            seed: self.seed.or(Some(t.seed)),
            base: self.base.or(Some(u.base_channels)),
            img_size: self.img_size.or(Some(128)),
            init_bitwidth: self.init_bitwidth.or(Some(u.init_bitwidth)),
            act_bits: self.act_bits.or(Some(u.act_bitwidth)),
            float: self.float.or(Some(false)),
            ..self
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            bit_lr: self.bit_lr,
            lambda: self.lambda.unwrap_or(d.lambda),
            seed: self.seed.unwrap_or(d.seed),
            ..d
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        let d = UNetConfig::default();
        UNetConfig {
            base_channels: self.base.unwrap_or(d.base_channels),
            quantized: !self.float.unwrap_or(false),
            act_bitwidth: self.act_bits.unwrap_or(d.act_bitwidth),
            init_bitwidth: self.init_bitwidth.unwrap_or(d.init_bitwidth),
            ..d
        }
    }

    pub fn img_size(&self) -> usize {
        self.img_size.unwrap_or(128)
    }

    pub fn require_data(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing --data (or `data` in the config file)".into()))
    }

    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing --out (or `out` in the config file)".into()))
    }

    pub fn write_effective(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Usage(e.to_string()))?;
        std::fs::write(dir.join(EFFECTIVE_CONFIG), text)?;
        Ok(())
    }
}
