//! Robustness protocols: missing devices, low light, cross-dataset transfer.

use serde::{Deserialize, Serialize};

use crate::data::{degrade_low_light, RawClip};
use crate::error::{Error, Result};
use crate::imu::NormStats;
use crate::metrics::MetricsReport;
use crate::model::{EviMae, ModalitySet, ModelConfig, Sample};
use crate::rng::derive_seed;
use crate::train::{evaluate, finetune, fit_stats, make_samples, pretrain, TrainConfig, TrainState};

/// Finetune a copy of `init` (which must not carry a head yet) and
/// evaluate it on `test` with the same missing-device set.
pub fn finetune_and_evaluate(
    init: &EviMae,
    train: &[Sample],
    test: &[Sample],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(EviMae, MetricsReport)> {
    if init.head.is_some() {
        return Err(Error::Config("finetuning starts from a model without a classifier head".into()));
    }
    let mut state = TrainState::new(init.clone());
    finetune(&mut state, train, classes, cfg, |_, _, _| Ok(()))?;
    let missing = cfg.missing_indices(&state.model.config)?;
    let report = evaluate(&state.model, test, cfg.modality, &missing, cfg.batch_size)?;
    Ok((state.model, report))
}

/// Pretrain a fresh model seeded from `cfg.seed`.
pub fn pretrain_model(config: &ModelConfig, samples: &[Sample], cfg: &TrainConfig) -> Result<EviMae> {
    let mut state = TrainState::new(EviMae::new(config.clone(), cfg.seed)?);
    pretrain(&mut state, samples, cfg, None, |_, _| Ok(()))?;
    Ok(state.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceMissingReport {
    pub missing_devices: Vec<String>,
    pub all_devices: MetricsReport,
    pub with_missing: MetricsReport,
    pub absolute_drop: f64,
    /// `absolute_drop / all-device accuracy` (0 when that accuracy is 0).
    pub relative_drop: f64,
}

/// Finetune and evaluate twice from the same starting model: once with
/// every device, once with `missing` removed at finetuning and evaluation.
pub fn protocol_device_missing(
    init: &EviMae,
    train: &[Sample],
    test: &[Sample],
    classes: usize,
    cfg: &TrainConfig,
    missing: &[String],
) -> Result<DeviceMissingReport> {
    for d in missing {
        init.config.device_index(d)?;
    }
    let full_cfg = TrainConfig { missing_devices: Vec::new(), ..cfg.clone() };
    let (_, all_devices) = finetune_and_evaluate(init, train, test, classes, &full_cfg)?;
    let missing_cfg = TrainConfig { missing_devices: missing.to_vec(), ..cfg.clone() };
    let (_, with_missing) = finetune_and_evaluate(init, train, test, classes, &missing_cfg)?;
    let absolute_drop = all_devices.top1_accuracy - with_missing.top1_accuracy;
    let relative_drop = if all_devices.top1_accuracy > 0.0 { absolute_drop / all_devices.top1_accuracy } else { 0.0 };
    Ok(DeviceMissingReport { missing_devices: missing.to_vec(), all_devices, with_missing, absolute_drop, relative_drop })
}

/// Sensor noise added by the low-light simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowLightNoise {
    pub shot_strength: f64,
    pub read_sigma: f64,
    pub seed: u64,
}

impl Default for LowLightNoise {
    fn default() -> Self {
        Self { shot_strength: 0.01, read_sigma: 0.01, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub light_level: f64,
    pub report: MetricsReport,
}

/// Evaluate a finetuned model on darkened copies of `clips`, one report per
/// level. Level 1.0 uses the clean frames untouched.
#[allow(clippy::too_many_arguments)]
pub fn protocol_low_light(
    model: &EviMae,
    stats: &NormStats,
    clips: &[RawClip],
    classes: &[String],
    modality: ModalitySet,
    levels: &[f64],
    noise: &LowLightNoise,
    batch_size: usize,
) -> Result<Vec<LevelReport>> {
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return Err(Error::InvalidParam(format!("light level {l} outside (0, 1]")));
    }
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let samples = if level == 1.0 {
            make_samples(clips, &model.config, stats, modality, classes, 1)?
        } else {
            let dark = clips
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let seed = derive_seed(noise.seed, &[i as u64]);
                    let frames = degrade_low_light(&c.frames, level, noise.shot_strength, noise.read_sigma, seed)?;
                    Ok(RawClip { frames, ..c.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            make_samples(&dark, &model.config, stats, modality, classes, 1)?
        };
        let report = evaluate(model, &samples, modality, &[], batch_size)?;
        out.push(LevelReport { light_level: level, report });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    pub pretrain_stats: NormStats,
    pub finetune_stats: NormStats,
    pub report: MetricsReport,
}

/// Labeled halves of the finetuning dataset.
pub struct TargetSet<'a> {
    pub train: &'a [RawClip],
    pub test: &'a [RawClip],
    pub classes: &'a [String],
}

fn device_ids(clips: &[RawClip], name: &str) -> Result<Vec<String>> {
    let first = clips.first().ok_or_else(|| Error::EmptySplit(name.into()))?;
    Ok(first.manifest.devices.iter().map(|d| d.device_id.clone()).collect())
}

/// Result of finetuning on a target dataset.
pub struct TargetRun {
    pub model: EviMae,
    pub stats: NormStats,
    pub report: MetricsReport,
}

/// Finetune `init` on `target` with statistics fitted to the target train
/// split, then evaluate on the target test split. Devices are matched by
/// position, so `init` needs the same device count as the target.
pub fn finetune_on_target(init: &EviMae, target: &TargetSet<'_>, cfg: &TrainConfig, workers: usize) -> Result<TargetRun> {
    let target_devices = device_ids(target.train, "finetune train")?;
    if init.config.devices.len() != target_devices.len() {
        return Err(Error::Config(format!(
            "pretrained model has {} devices but finetuning set has {}",
            init.config.devices.len(),
            target_devices.len()
        )));
    }
    let config = ModelConfig { devices: target_devices, ..init.config.clone() };
    let model = EviMae { config: config.clone(), ..init.clone() };
    let stats = fit_stats(target.train, &config)?;
    let m = cfg.modality;
    let train = make_samples(target.train, &config, &stats, m, target.classes, workers)?;
    let test = make_samples(target.test, &config, &stats, m, target.classes, workers)?;
    let (model, report) = finetune_and_evaluate(&model, &train, &test, target.classes.len(), cfg)?;
    Ok(TargetRun { model, stats, report })
}

/// Pretrain on `source` (with its own statistics), then finetune and
/// evaluate on `target` via [`finetune_on_target`].
/// `pretrain_cfg = None` finetunes from scratch instead.
pub fn protocol_cross_dataset(
    source: &[RawClip],
    target: &TargetSet<'_>,
    config: &ModelConfig,
    pretrain_cfg: Option<&TrainConfig>,
    finetune_cfg: &TrainConfig,
    workers: usize,
) -> Result<CrossDatasetReport> {
    let source_devices = if source.is_empty() { config.devices.clone() } else { device_ids(source, "pretrain")? };
    if source_devices.len() != config.devices.len() {
        return Err(Error::Config(format!(
            "pretraining set has {} devices but the model config lists {}",
            source_devices.len(),
            config.devices.len()
        )));
    }
    let source_config = ModelConfig { devices: source_devices, ..config.clone() };
    let (pretrain_stats, init) = match pretrain_cfg {
        Some(pc) => {
            let stats = fit_stats(source, &source_config)?;
            let samples = make_samples(source, &source_config, &stats, pc.modality, &[], workers)?;
            (stats, pretrain_model(&source_config, &samples, pc)?)
        }
        None => (NormStats::identity(), EviMae::new(source_config, finetune_cfg.seed)?),
    };
    let run = finetune_on_target(&init, target, finetune_cfg, workers)?;
    Ok(CrossDatasetReport { pretrain_stats, finetune_stats: run.stats, report: run.report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_clips, DeviceSpec, Split, SyntheticSpec};
    use crate::model::MaskConfig;
    use crate::train::Phase;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec { clips_per_class: 5, num_classes: 2, frame_size: (16, 16), ..SyntheticSpec::desk(seed) }
    }

    fn small_config(devices: Vec<String>) -> ModelConfig {
        let mut cfg = ModelConfig::desk(devices);
        cfg.video = crate::video::VideoConfig { frames: 4, height: 16, width: 16, patch: 8, tubelet: 2 };
        cfg.encoder = crate::encoders::EncoderConfig {
            embed_dim: 16,
            depth_video: 1,
            depth_imu: 1,
            heads: 2,
            mlp_ratio: 2.0,
            unified_depth: 1,
        };
        cfg.decoder = crate::decoder::DecoderConfig { dim: 16, depth: 1, heads: 2, mlp_ratio: 2.0 };
        cfg.gin.hidden_dim = 16;
        cfg
    }

    fn finetune_cfg(modality: ModalitySet) -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 4, modality, ..TrainConfig::desk(Phase::Finetune) }
    }

    fn classes(spec: &SyntheticSpec) -> Vec<String> {
        (0..spec.num_classes).map(SyntheticSpec::class_name).collect()
    }

    fn owned(clips: Vec<&RawClip>) -> Vec<RawClip> {
        clips.into_iter().cloned().collect()
    }

    #[test]
    fn unknown_missing_device_is_rejected() {
        let spec = small_spec(0);
        let cfg = small_config(spec.devices.iter().map(|d| d.device_id.clone()).collect());
        let model = EviMae::new(cfg, 0).unwrap();
        let err = protocol_device_missing(&model, &[], &[], 2, &finetune_cfg(ModalitySet::Imu), &["nose".into()]);
        assert!(matches!(err, Err(Error::UnknownDevice(_))));
    }

    #[test]
    fn empty_missing_set_gives_identical_reports() {
        let spec = small_spec(1);
        let data = synthesize_clips(&spec).unwrap();
        let cfg = small_config(spec.devices.iter().map(|d| d.device_id.clone()).collect());
        let names = classes(&spec);
        let train = owned(data.split(Split::Train));
        let stats = fit_stats(&train, &cfg).unwrap();
        let samples = make_samples(&train, &cfg, &stats, ModalitySet::Imu, &names, 1).unwrap();
        let model = EviMae::new(cfg, 0).unwrap();
        let r = protocol_device_missing(&model, &samples, &samples, 2, &finetune_cfg(ModalitySet::Imu), &[]).unwrap();
        assert_eq!(r.all_devices, r.with_missing);
        assert_eq!(r.absolute_drop, 0.0);
    }

    #[test]
    fn full_light_is_bit_identical_to_clean_and_bad_levels_fail() {
        let spec = small_spec(2);
        let data = synthesize_clips(&spec).unwrap();
        let cfg = small_config(spec.devices.iter().map(|d| d.device_id.clone()).collect());
        let names = classes(&spec);
        let test = owned(data.split(Split::Test));
        let stats = NormStats::identity();
        let mut model = EviMae::new(cfg.clone(), 0).unwrap();
        model.add_head(2, false, 0).unwrap();
        let clean = make_samples(&test, &cfg, &stats, ModalitySet::Video, &names, 1).unwrap();
        let clean_report = evaluate(&model, &clean, ModalitySet::Video, &[], 4).unwrap();
        let noise = LowLightNoise::default();
        let levels =
            protocol_low_light(&model, &stats, &test, &names, ModalitySet::Video, &[1.0, 0.1], &noise, 4).unwrap();
        assert_eq!(levels.len(), 2);
        assert_eq!(levels[0].report, clean_report);
        let bad = protocol_low_light(&model, &stats, &test, &names, ModalitySet::Video, &[0.0], &noise, 4);
        assert!(matches!(bad, Err(Error::InvalidParam(_))));
    }

    #[test]
    fn device_count_mismatch_is_a_config_error() {
        let a = small_spec(3);
        let mut b = small_spec(4);
        b.devices.push(DeviceSpec::new("chest", 50.0));
        let (da, db) = (synthesize_clips(&a).unwrap(), synthesize_clips(&b).unwrap());
        let cfg = small_config(a.devices.iter().map(|d| d.device_id.clone()).collect());
        let names = classes(&b);
        let (train, test) = (owned(db.split(Split::Train)), owned(db.split(Split::Test)));
        let target = TargetSet { train: &train, test: &test, classes: &names };
        let pc = TrainConfig { epochs: 1, masks: MaskConfig::default(), ..TrainConfig::desk(Phase::Pretrain) };
        let err = protocol_cross_dataset(&owned(da.split(Split::Pretrain)), &target, &cfg, Some(&pc), &finetune_cfg(ModalitySet::Imu), 1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn same_source_and_target_runs_end_to_end() {
        let spec = small_spec(5);
        let data = synthesize_clips(&spec).unwrap();
        let cfg = small_config(spec.devices.iter().map(|d| d.device_id.clone()).collect());
        let names = classes(&spec);
        let (train, test) = (owned(data.split(Split::Train)), owned(data.split(Split::Test)));
        let target = TargetSet { train: &train, test: &test, classes: &names };
        let pc = TrainConfig { epochs: 1, batch_size: 4, modality: ModalitySet::Imu, ..TrainConfig::desk(Phase::Pretrain) };
        let r = protocol_cross_dataset(&train, &target, &cfg, Some(&pc), &finetune_cfg(ModalitySet::Imu), 1).unwrap();
        assert_eq!(r.pretrain_stats, r.finetune_stats);
        assert_eq!(r.report.num_samples, test.len());
    }
}
