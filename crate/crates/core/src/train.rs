//! Preprocessing into samples, the pretraining and finetuning loops, and
//! evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::RawClip;
use crate::error::{Error, Result};
use crate::imu::{clip_series, prepare_series, preprocess_clip_imu, NormStats};
use crate::metrics::{evaluate_scores, MetricsReport};
use crate::model::{EviMae, MaskConfig, ModalitySet, ModelConfig, PretrainOptions, Sample};
use crate::objectives::{cross_entropy, LossReport, LossWeights};
use crate::optim::{Adam, AdamConfig, StepDecay};
use crate::rng::{derive_seed, rng_for, stream};
use crate::video::preprocess_video;

pub const LOG_HEADER: [&str; 7] = ["step", "l_mse_video", "l_mse_imu", "l_cos", "l_con", "total", "lr"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    /// Classifier head learning rate relative to the encoders.
    pub head_lr_multiplier: f64,
    pub weights: LossWeights,
    pub masks: MaskConfig,
    pub modality: ModalitySet,
    pub use_graph: bool,
    /// Reconstruction loss over masked patches only.
    pub masked_only: bool,
    pub missing_devices: Vec<String>,
    pub seed: u64,
}

impl TrainConfig {
    fn base(phase: Phase) -> Self {
        Self {
            phase,
            batch_size: 8,
            epochs: 1,
            base_lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every_epochs: 10,
            head_lr_multiplier: 100.0,
            weights: LossWeights::default(),
            masks: MaskConfig::default(),
            modality: ModalitySet::Both,
            use_graph: true,
            masked_only: true,
            missing_devices: Vec::new(),
            seed: 0,
        }
    }

    pub fn paper(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self {
                batch_size: 24,
                epochs: 300,
                base_lr: 5e-5,
                lr_decay_every_epochs: 100,
                ..Self::base(phase)
            },
            Phase::Finetune => Self {
                batch_size: 16,
                epochs: 200,
                base_lr: 5e-5,
                lr_decay_every_epochs: 60,
                ..Self::base(phase)
            },
        }
    }

    pub fn desk(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self { epochs: 30, base_lr: 1e-3, lr_decay_every_epochs: 10, ..Self::base(phase) },
            Phase::Finetune => Self { epochs: 40, base_lr: 5e-5, lr_decay_every_epochs: 20, ..Self::base(phase) },
        }
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay { base_lr: self.base_lr, factor: self.lr_decay_factor, every_epochs: self.lr_decay_every_epochs }
    }

    /// Learning rate of a named parameter at `epoch`.
    pub fn lr_for(&self, name: &str, epoch: usize) -> f64 {
        let lr = self.schedule().lr(epoch);
        if name == "head" || name.starts_with("head.") {
            lr * self.head_lr_multiplier
        } else {
            lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.head_lr_multiplier > 0.0) {
            return Err(Error::Config("head_lr_multiplier must be positive".into()));
        }
        for (name, r) in [("imu", self.masks.imu_ratio), ("video", self.masks.video_ratio), ("graph", self.masks.graph_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} mask ratio {r} outside [0, 1]")));
            }
        }
        self.schedule().validate()?;
        self.weights.validate()
    }

    /// Indices of `missing_devices` in the model's device order.
    pub fn missing_indices(&self, config: &ModelConfig) -> Result<Vec<usize>> {
        self.missing_devices.iter().map(|d| config.device_index(d)).collect()
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            modality: self.modality,
            use_graph: self.use_graph,
            masks: self.masks.clone(),
            weights: self.weights.clone(),
            masked_only: self.masked_only,
        }
    }
}

/// Per-axis statistics over every pretraining clip and device, after
/// cleaning and resampling.
pub fn fit_stats(clips: &[RawClip], config: &ModelConfig) -> Result<NormStats> {
    let mut series = Vec::new();
    for clip in clips {
        for s in clip_series(clip, &config.devices)? {
            series.push(prepare_series(&s, &config.stft)?);
        }
    }
    NormStats::fit(&series)
}

/// Class index of a clip label; `None` for unlabeled clips or when no
/// classes are given (pretraining ignores labels).
fn label_index(clip: &RawClip, classes: &[String]) -> Result<Option<usize>> {
    match &clip.manifest.label {
        None => Ok(None),
        Some(_) if classes.is_empty() => Ok(None),
        Some(l) => classes
            .iter()
            .position(|c| c == l)
            .map(Some)
            .ok_or_else(|| Error::ManifestMismatch(format!("clip {}: label {l:?} not among the classes", clip.manifest.clip_id))),
    }
}

/// Tokens for one clip; modalities outside `modality` are skipped.
pub fn make_sample(
    clip: &RawClip,
    config: &ModelConfig,
    stats: &NormStats,
    modality: ModalitySet,
    classes: &[String],
) -> Result<Sample> {
    let imu = if modality.uses_imu() {
        Some(preprocess_clip_imu(clip, &config.devices, &config.stft, stats, config.imu_patch)?)
    } else {
        None
    };
    let video = if modality.uses_video() { Some(preprocess_video(&clip.frames, &config.video)?) } else { None };
    Ok(Sample { clip_id: clip.manifest.clip_id.clone(), imu, video, label: label_index(clip, classes)? })
}

/// [`make_sample`] over many clips on up to `workers` threads; output order
/// follows the input.
pub fn make_samples(
    clips: &[RawClip],
    config: &ModelConfig,
    stats: &NormStats,
    modality: ModalitySet,
    classes: &[String],
    workers: usize,
) -> Result<Vec<Sample>> {
    let workers = workers.clamp(1, clips.len().max(1));
    if workers == 1 {
        return clips.iter().map(|c| make_sample(c, config, stats, modality, classes)).collect();
    }
    let chunk = clips.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| make_sample(c, config, stats, modality, classes)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("preprocessing worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(clips.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Model plus optimizer state and the global step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: EviMae,
    pub adam: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: EviMae) -> Self {
        let adam = Adam::new(&model.params, AdamConfig::default());
        Self { model, adam, step: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Shuffled batches of sample indices for one epoch; a pure function of
/// `(seed, epoch)`. The last batch may be short.
pub fn epoch_batches(samples: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One optimisation step of the pretraining objective. Masks come from
/// `mask_seed`.
pub fn pretrain_step(
    state: &mut TrainState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    epoch: usize,
    mask_seed: u64,
) -> Result<LossReport> {
    let opts = cfg.pretrain_options();
    let masks = state.model.draw_masks(batch.len(), &opts.masks, mask_seed)?;
    let (report, grads) = {
        let mut t = Tape::new(&state.model.params);
        let out = state.model.pretrain_forward(&mut t, batch, &opts, &masks)?;
        (out.report, t.backward(out.total).into_param_grads(&state.model.params))
    };
    if !report.total.is_finite() {
        return Err(Error::InvalidParam(format!("non-finite pretraining loss at step {}", state.step)));
    }
    state.adam.update(&mut state.model.params, &grads, |name| cfg.lr_for(name, epoch));
    state.step += 1;
    Ok(report)
}

/// Pretrain from `state.step` up to `cfg.epochs` epochs (or `stop_at` steps,
/// whichever comes first). The batch and masks of every step depend only on
/// the seed and the step number, so a run resumed from a checkpoint follows
/// the same trajectory.
pub fn pretrain(
    state: &mut TrainState,
    samples: &[Sample],
    cfg: &TrainConfig,
    stop_at: Option<u64>,
    mut on_step: impl FnMut(&StepLog, &TrainState) -> Result<()>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySplit("pretrain".into()));
    }
    let spe = steps_per_epoch(samples.len(), cfg.batch_size) as u64;
    let mut end = spe * cfg.epochs as u64;
    if let Some(s) = stop_at {
        end = end.min(s);
    }
    let mut logs = Vec::new();
    let mut cached: Option<(usize, Vec<Vec<usize>>)> = None;
    while state.step < end {
        let epoch = (state.step / spe) as usize;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch)));
        }
        let batches = &cached.as_ref().expect("just filled").1;
        let idx = &batches[(state.step % spe) as usize];
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let step = state.step;
        let lr = cfg.schedule().lr(epoch);
        let report = pretrain_step(state, &batch, cfg, epoch, derive_seed(cfg.seed, &[step]))?;
        let log = StepLog { step, epoch, lr, report };
        on_step(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Append-only CSV training log.
pub struct LogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LogWriter<W> {
    pub fn new(writer: W, header: bool) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        if header {
            inner.write_record(LOG_HEADER).map_err(csv_error)?;
        }
        Ok(Self { inner })
    }

    pub fn write(&mut self, log: &StepLog) -> Result<()> {
        let r = &log.report;
        let row = [
            log.step.to_string(),
            format_float(r.l_mse_video),
            format_float(r.l_mse_imu),
            format_float(r.l_cos),
            format_float(r.l_con),
            format_float(r.total),
            format_float(log.lr),
        ];
        self.inner.write_record(&row).map_err(csv_error)?;
        self.inner.flush().map_err(|e| Error::io("training log", e))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse { path: "training log".into(), message: e.to_string() }
}

/// Shortest text that parses back to the same `f64`.
fn format_float(x: f64) -> String {
    format!("{x:?}")
}

fn labels_of(batch: &[&Sample]) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::EmptySplit(format!("clip {} has no label", s.clip_id))))
        .collect()
}

/// One cross-entropy step on a labeled batch; returns the loss.
pub fn finetune_step(
    state: &mut TrainState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    epoch: usize,
    missing: &[usize],
) -> Result<f64> {
    let labels = labels_of(batch)?;
    let (loss, grads) = {
        let mut t = Tape::new(&state.model.params);
        let logits = state.model.classify_forward(&mut t, batch, cfg.modality, missing)?;
        let loss = cross_entropy(&mut t, logits, &labels)?;
        (t.value(loss).item(), t.backward(loss).into_param_grads(&state.model.params))
    };
    state.adam.update(&mut state.model.params, &grads, |name| cfg.lr_for(name, epoch));
    state.step += 1;
    Ok(loss)
}

/// One pass over `samples`; returns the mean batch loss.
pub fn finetune_epoch(state: &mut TrainState, samples: &[Sample], cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let missing = cfg.missing_indices(&state.model.config)?;
    let batches = epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch);
    let mut total = 0.0;
    for idx in &batches {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        total += finetune_step(state, &batch, cfg, epoch, &missing)?;
    }
    Ok(total / batches.len() as f64)
}

/// Attach a head if needed and run `cfg.epochs` finetuning epochs;
/// `on_epoch(epoch, state, mean_loss)` runs after each.
pub fn finetune(
    state: &mut TrainState,
    samples: &[Sample],
    classes: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &TrainState, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    cfg.missing_indices(&state.model.config)?;
    if state.model.head.is_none() {
        let with_graph = cfg.use_graph && cfg.modality.uses_imu();
        state.model.add_head(classes, with_graph, cfg.seed)?;
        let missing = cfg.missing_indices(&state.model.config)?;
        state.model.fit_head_standardization(samples, cfg.modality, &missing, cfg.batch_size)?;
        state.adam.sync(&state.model.params);
    }
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = finetune_epoch(state, samples, cfg, epoch)?;
        on_epoch(epoch, state, loss)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Softmax class scores for every sample, in input order.
pub fn predict(
    model: &EviMae,
    samples: &[Sample],
    modality: ModalitySet,
    missing: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let mut t = Tape::new(&model.params);
        let logits = model.classify_forward(&mut t, &batch, modality, missing)?;
        let probs = t.softmax_rows(logits);
        let v = t.value(probs);
        out.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
    }
    Ok(out)
}

pub fn evaluate(
    model: &EviMae,
    samples: &[Sample],
    modality: ModalitySet,
    missing: &[usize],
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let head = model.head.as_ref().ok_or_else(|| Error::Config("model has no classifier head".into()))?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let labels = labels_of(&batch)?;
    let scores = predict(model, samples, modality, missing, batch_size)?;
    evaluate_scores(&scores, &labels, head.classes)
}
