//! Run configuration: one JSON file plus flag overrides, resolved into a
//! fully specified document that is written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use evimae::model::{ModalitySet, ModelConfig};
use evimae::protocols::LowLightNoise;
use evimae::train::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DeviceScale {
    /// Small model and short schedules that run on a laptop CPU.
    #[default]
    Desk,
    /// Full-size model and the published schedules.
    Paper,
}

fn default_light_levels() -> Vec<f64> {
    vec![1.0, 0.5, 0.25, 0.1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    #[serde(default)]
    pub missing_devices: Vec<String>,
    #[serde(default = "default_light_levels")]
    pub light_levels: Vec<f64>,
    #[serde(default)]
    pub low_light_noise: LowLightNoise,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { missing_devices: Vec::new(), light_levels: default_light_levels(), low_light_noise: LowLightNoise::default() }
    }
}

/// The file form: every section optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub device_scale: Option<DeviceScale>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub modality: Option<ModalitySet>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    #[serde(default)]
    pub protocol: Option<ProtocolConfig>,
    #[serde(default)]
    pub checkpoint_every_epochs: Option<usize>,
    #[serde(default)]
    pub eval_batch_size: Option<usize>,
}

/// Everything filled in. Serializes to a valid [`RunConfig`] file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub dataset: PathBuf,
    pub device_scale: DeviceScale,
    pub seed: u64,
    pub modality: ModalitySet,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub protocol: ProtocolConfig,
    pub checkpoint_every_epochs: usize,
    pub eval_batch_size: usize,
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub seed: Option<u64>,
    pub modality: Option<ModalitySet>,
    pub device_scale: Option<DeviceScale>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::ConfigFile { path: path.to_path_buf(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| CliError::ConfigFile { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn dataset(&self, overrides: &Overrides) -> Result<PathBuf> {
        overrides
            .dataset
            .clone()
            .or_else(|| self.dataset.clone())
            .ok_or_else(|| CliError::Usage("no dataset: pass --data or set \"dataset\" in the config".into()))
    }

    /// Fill defaults for `devices` at the chosen scale, then apply the
    /// top-level seed and modality to both training phases.
    pub fn resolve(self, overrides: &Overrides, devices: Vec<String>) -> Result<Resolved> {
        let dataset = self.dataset(overrides)?;
        let device_scale = overrides.device_scale.or(self.device_scale).unwrap_or_default();
        let (model, pretrain, finetune) = match device_scale {
            DeviceScale::Desk => {
                (ModelConfig::desk(devices), TrainConfig::desk(Phase::Pretrain), TrainConfig::desk(Phase::Finetune))
            }
            DeviceScale::Paper => {
                (ModelConfig::paper(devices), TrainConfig::paper(Phase::Pretrain), TrainConfig::paper(Phase::Finetune))
            }
        };
        let mut pretrain = self.pretrain.unwrap_or(pretrain);
        let mut finetune = self.finetune.unwrap_or(finetune);
        let seed = overrides.seed.or(self.seed).unwrap_or(pretrain.seed);
        let modality = overrides.modality.or(self.modality).unwrap_or(pretrain.modality);
        for tc in [&mut pretrain, &mut finetune] {
            tc.seed = seed;
            tc.modality = modality;
        }
        let checkpoint_every_epochs = self.checkpoint_every_epochs.unwrap_or(5);
        let eval_batch_size = self.eval_batch_size.unwrap_or(finetune.batch_size);
        if checkpoint_every_epochs == 0 || eval_batch_size == 0 {
            return Err(CliError::Usage("checkpoint_every_epochs and eval_batch_size must be positive".into()));
        }
        let resolved = Resolved {
            dataset,
            device_scale,
            seed,
            modality,
            model: self.model.unwrap_or(model),
            pretrain,
            finetune,
            protocol: self.protocol.unwrap_or_default(),
            checkpoint_every_epochs,
            eval_batch_size,
        };
        resolved.model.validate()?;
        resolved.pretrain.validate()?;
        resolved.finetune.validate()?;
        Ok(resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn devices() -> Vec<String> {
        ["a", "b"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sede": 2}"#).unwrap_err();
        assert!(err.to_string().contains("sede"));
        let nested = r#"{"protocol": {"light_levels": [0.5], "typo": 1}}"#;
        assert!(serde_json::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn flags_override_the_file_and_reach_both_phases() {
        let file: RunConfig =
            serde_json::from_str(r#"{"dataset": "d", "seed": 3, "modality": "video", "device_scale": "desk"}"#).unwrap();
        let r = file.clone().resolve(&Overrides::default(), devices()).unwrap();
        assert_eq!((r.seed, r.modality), (3, ModalitySet::Video));
        assert_eq!((r.pretrain.seed, r.finetune.modality), (3, ModalitySet::Video));
        let o = Overrides { seed: Some(9), modality: Some(ModalitySet::Imu), ..Overrides::default() };
        let r = file.resolve(&o, devices()).unwrap();
        assert_eq!((r.pretrain.seed, r.finetune.seed, r.finetune.modality), (9, 9, ModalitySet::Imu));
    }

    #[test]
    fn resolved_config_reloads_to_itself() {
        let o = Overrides { dataset: Some("data".into()), device_scale: Some(DeviceScale::Paper), ..Overrides::default() };
        let r = RunConfig::default().resolve(&o, devices()).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let again: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(again.resolve(&Overrides::default(), vec!["x".into()]).unwrap(), r);
    }

    #[test]
    fn missing_dataset_is_a_usage_error() {
        let err = RunConfig::default().resolve(&Overrides::default(), devices()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
