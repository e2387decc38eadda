//! One function per subcommand. Each writes into its own output directory
//! and never touches the dataset it reads.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use evimae::checkpoint::{write_preprocess_stats, Checkpoint};
use evimae::data::{generate_synthetic_dataset, read_manifest, Dataset, LoadParts, RawClip, Split, SyntheticSpec};
use evimae::imu::NormStats;
use evimae::metrics::MetricsReport;
use evimae::model::{EviMae, ModalitySet};
use evimae::protocols::{finetune_on_target, protocol_device_missing, protocol_low_light, CrossDatasetReport, TargetSet};
use evimae::train::{evaluate, finetune, fit_stats, make_samples, pretrain, LogWriter, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::{Overrides, Resolved, RunConfig};
use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const RUN_SUMMARY: &str = "run.json";
pub const METRICS: &str = "metrics.json";
pub const SWEEP: &str = "sweep.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const PREPROCESS_STATS: &str = "preprocess_stats.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Standard,
    DeviceMissing,
    LowLight,
    CrossDataset,
}

/// What `report` reads from a run directory besides the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub modality: ModalitySet,
    /// `None` when the run cannot tell (evaluating a checkpoint of unknown origin).
    pub pretrained: Option<bool>,
    pub graph: bool,
    pub seed: u64,
    #[serde(default)]
    pub protocol: Option<Protocol>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub initial_loss: Option<f64>,
    #[serde(default)]
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
}

/// Loader parallelism: available cores, capped by `EVIMAE_NUM_WORKERS`.
pub fn workers() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("EVIMAE_NUM_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(available),
        _ => available,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(evimae::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn parts_for(modality: ModalitySet) -> LoadParts {
    LoadParts { video: modality.uses_video(), imu: modality.uses_imu() }
}

/// Device ids of the first clip found in any split.
fn dataset_devices(ds: &Dataset) -> Result<Vec<String>> {
    let id = Split::ALL
        .iter()
        .find_map(|&s| ds.clip_ids(s).first())
        .ok_or_else(|| evimae::Error::EmptySplit("dataset lists no clips".into()))?;
    let manifest = read_manifest(&ds.clip_dir(id))?;
    Ok(manifest.devices.iter().map(|d| d.device_id.clone()).collect())
}

fn open_and_resolve(config: Option<&Path>, overrides: &Overrides) -> Result<(Dataset, Resolved)> {
    let file = RunConfig::load(config)?;
    let ds = Dataset::open(&file.dataset(overrides)?)?;
    let devices = dataset_devices(&ds)?;
    let resolved = file.resolve(overrides, devices)?;
    Ok((ds, resolved))
}

fn nonempty(clips: Vec<RawClip>, split: Split) -> Result<Vec<RawClip>> {
    if clips.is_empty() {
        return Err(evimae::Error::EmptySplit(split.as_str().into()).into());
    }
    Ok(clips)
}

pub fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<usize> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::ConfigFile { path: spec_path.to_path_buf(), message: e.to_string() })?;
    let mut spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::ConfigFile { path: spec_path.to_path_buf(), message: e.to_string() })?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let count = generate_synthetic_dataset(&spec, out)?;
    write_json(&out.join("synthetic_spec.json"), &spec)?;
    println!("wrote {count} clips to {}", out.display());
    Ok(count)
}

pub fn pretrain_cmd(config: Option<&Path>, overrides: &Overrides, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let (ds, mut cfg) = open_and_resolve(config, overrides)?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        if ck.state.model.head.is_some() {
            return Err(CliError::Usage("cannot resume pretraining from a finetuned checkpoint".into()));
        }
        cfg.model = ck.state.model.config.clone();
    }
    prepare_out(out)?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    let tc = cfg.pretrain.clone();
    let clips = nonempty(ds.load_split_with(Split::Pretrain, parts_for(tc.modality))?, Split::Pretrain)?;
    let (mut state, stats) = match resumed {
        Some(ck) => (ck.state, ck.stats),
        None => {
            let stats = if tc.modality.uses_imu() { fit_stats(&clips, &cfg.model)? } else { NormStats::identity() };
            (TrainState::new(EviMae::new(cfg.model.clone(), tc.seed)?), stats)
        }
    };
    write_preprocess_stats(&out.join(PREPROCESS_STATS), &cfg.model, &stats)?;
    let samples = make_samples(&clips, &cfg.model, &stats, tc.modality, &[], workers())?;
    let spe = evimae::train::steps_per_epoch(samples.len(), tc.batch_size) as u64;

    let log_path = out.join(TRAIN_LOG);
    let append = state.step > 0 && log_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = LogWriter::new(BufWriter::new(file), !append)?;

    let ck_path = out.join(CHECKPOINT);
    let snapshot = |state: &TrainState, epoch: usize| Checkpoint {
        state: state.clone(),
        stats: stats.clone(),
        classes: Vec::new(),
        train: Some(tc.clone()),
        epoch,
        seed: tc.seed,
    };
    let every = cfg.checkpoint_every_epochs as u64;
    let logs = pretrain(&mut state, &samples, &tc, None, |entry, st| {
        log.write(entry)?;
        if st.step % spe == 0 {
            let epoch = st.step / spe;
            log::info!("epoch {epoch}: total loss {:.5}", entry.report.total);
            if epoch % every == 0 {
                snapshot(st, epoch as usize).save(&ck_path)?;
            }
        }
        Ok(())
    })?;
    let epoch = (state.step / spe.max(1)) as usize;
    snapshot(&state, epoch).save(&ck_path)?;
    let summary = RunSummary {
        command: "pretrain".into(),
        modality: tc.modality,
        pretrained: Some(true),
        graph: tc.use_graph,
        seed: tc.seed,
        protocol: None,
        checkpoint: Some(ck_path.clone()),
        steps: Some(state.step),
        initial_loss: logs.first().map(|l| l.report.total),
        final_loss: logs.last().map(|l| l.report.total),
        best_epoch: None,
    };
    write_json(&out.join(RUN_SUMMARY), &summary)?;
    println!("checkpoint: {}", ck_path.display());
    Ok(ck_path)
}

/// Where finetuning starts.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Scratch,
    Checkpoint(PathBuf),
}

impl std::str::FromStr for Init {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "scratch" { Init::Scratch } else { Init::Checkpoint(PathBuf::from(s)) })
    }
}

/// Checkpoints without a head are pretrained; with one, finetuned.
fn require_head(ck: &Checkpoint, path: &Path, finetuned: bool) -> Result<()> {
    match (ck.state.model.head.is_some(), finetuned) {
        (true, false) => Err(CliError::Usage(format!("{} already carries a classifier head", path.display()))),
        (false, true) => Err(CliError::Usage(format!("{} has no classifier head; finetune it first", path.display()))),
        _ => Ok(()),
    }
}

fn load_pretrained(path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    require_head(&ck, path, false)?;
    Ok(ck)
}

pub fn finetune_cmd(
    config: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
    init: &Init,
    missing: Option<Vec<String>>,
) -> Result<MetricsReport> {
    let (ds, mut cfg) = open_and_resolve(config, overrides)?;
    let pretrained = match init {
        Init::Scratch => None,
        Init::Checkpoint(p) => Some(load_pretrained(p)?),
    };
    if let Some(ck) = &pretrained {
        cfg.model = ck.state.model.config.clone();
    }
    if let Some(m) = missing {
        cfg.finetune.missing_devices = m;
    }
    let tc = cfg.finetune.clone();
    let missing = tc.missing_indices(&cfg.model)?;
    let classes = ds.class_names()?;
    prepare_out(out)?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;

    let parts = parts_for(tc.modality);
    let (model, stats) = match pretrained {
        Some(ck) => (ck.state.model, ck.stats),
        None => {
            let stats = if tc.modality.uses_imu() {
                let pool = ds.load_split_with(Split::Pretrain, LoadParts { video: false, imu: true })?;
                let pool = if pool.is_empty() { ds.load_split_with(Split::Train, LoadParts { video: false, imu: true })? } else { pool };
                fit_stats(&pool, &cfg.model)?
            } else {
                NormStats::identity()
            };
            (EviMae::new(cfg.model.clone(), tc.seed)?, stats)
        }
    };
    write_preprocess_stats(&out.join(PREPROCESS_STATS), &cfg.model, &stats)?;
    let load = |split: Split| -> Result<Vec<_>> {
        let clips = ds.load_split_with(split, parts)?;
        Ok(make_samples(&clips, &cfg.model, &stats, tc.modality, &classes, workers())?)
    };
    let train = load(Split::Train)?;
    if train.is_empty() {
        return Err(evimae::Error::EmptySplit("train".into()).into());
    }
    let val = load(Split::Val)?;
    let test = load(Split::Test)?;
    if val.is_empty() {
        log::warn!("no validation clips; keeping the final epoch");
    }

    let log_path = out.join(TRAIN_LOG);
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| csv_error(&log_path, e))?;
    log.write_record(["epoch", "loss", "val_top1_accuracy", "val_macro_map", "lr"]).map_err(|e| csv_error(&log_path, e))?;

    let snapshot = |state: &TrainState, epoch: usize| Checkpoint {
        state: state.clone(),
        stats: stats.clone(),
        classes: classes.clone(),
        train: Some(tc.clone()),
        epoch,
        seed: tc.seed,
    };
    let best_path = out.join(BEST_CHECKPOINT);
    let mut best: Option<(usize, f64, EviMae)> = None;
    let mut state = TrainState::new(model);
    finetune(&mut state, &train, classes.len(), &tc, |epoch, st, loss| {
        let (acc, map) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let r = evaluate(&st.model, &val, tc.modality, &missing, cfg.eval_batch_size)?;
            (r.top1_accuracy, r.macro_map)
        };
        let row = [epoch.to_string(), format!("{loss:?}"), format!("{acc:?}"), format!("{map:?}"), format!("{:?}", tc.schedule().lr(epoch))];
        let logged = log.write_record(&row).map_err(|e| e.to_string()).and_then(|_| log.flush().map_err(|e| e.to_string()));
        logged.map_err(|message| evimae::Error::Parse { path: log_path.clone(), message })?;
        log::info!("epoch {epoch}: loss {loss:.5}, val accuracy {acc:.4}");
        let improved = val.is_empty() || best.as_ref().is_none_or(|b| acc > b.1);
        if improved {
            snapshot(st, epoch).save(&best_path)?;
            best = Some((epoch, acc, st.model.clone()));
        }
        Ok(())
    })?;
    snapshot(&state, tc.epochs).save(&out.join(CHECKPOINT))?;
    let (best_epoch, _, best_model) = best.ok_or_else(|| CliError::Usage("finetuning ran for zero epochs".into()))?;
    let report = if test.is_empty() {
        log::warn!("no test clips; reporting validation metrics");
        evaluate(&best_model, if val.is_empty() { &train } else { &val }, tc.modality, &missing, cfg.eval_batch_size)?
    } else {
        evaluate(&best_model, &test, tc.modality, &missing, cfg.eval_batch_size)?
    };
    write_json(&out.join(METRICS), &report)?;
    let summary = RunSummary {
        command: "finetune".into(),
        modality: tc.modality,
        pretrained: Some(matches!(init, Init::Checkpoint(_))),
        graph: tc.use_graph && tc.modality.uses_imu(),
        seed: tc.seed,
        protocol: None,
        checkpoint: Some(best_path.clone()),
        steps: Some(state.step),
        initial_loss: None,
        final_loss: None,
        best_epoch: Some(best_epoch),
    };
    write_json(&out.join(RUN_SUMMARY), &summary)?;
    println!("best checkpoint (epoch {best_epoch}): {}", best_path.display());
    println!("test accuracy {:.4}, macro mAP {:.4}", report.top1_accuracy, report.macro_map);
    Ok(report)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Csv { path: path.to_path_buf(), message: e.to_string() }
}

fn write_sweep(path: &Path, rows: &[(String, &MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["condition", "top1_accuracy", "macro_map"]).map_err(|e| csv_error(path, e))?;
    for (condition, r) in rows {
        w.write_record([condition.clone(), format!("{:?}", r.top1_accuracy), format!("{:?}", r.macro_map)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn eval_cmd(
    config: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
    checkpoint: &Path,
    protocol: Protocol,
    missing: Option<Vec<String>>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (ds, mut cfg) = open_and_resolve(config, overrides)?;
    cfg.model = ck.state.model.config.clone();
    // the checkpoint's own modality wins unless the flag asks otherwise
    let modality = overrides.modality.or(ck.train.as_ref().map(|t| t.modality)).unwrap_or(cfg.modality);
    cfg.modality = modality;
    cfg.finetune.modality = modality;
    if let Some(m) = missing {
        cfg.protocol.missing_devices = m;
    }
    for d in &cfg.protocol.missing_devices {
        cfg.model.device_index(d)?;
    }
    prepare_out(out)?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    let parts = parts_for(modality);
    let bs = cfg.eval_batch_size;
    let finetuned = matches!(protocol, Protocol::Standard | Protocol::LowLight);
    require_head(&ck, checkpoint, finetuned)?;
    let pretrained = if finetuned { None } else { Some(true) };
    let graph = match &ck.state.model.head {
        Some(h) => h.with_graph,
        None => cfg.finetune.use_graph && modality.uses_imu(),
    };
    match protocol {
        Protocol::Standard => {
            let clips = nonempty(ds.load_split_with(Split::Test, parts)?, Split::Test)?;
            let samples = make_samples(&clips, &cfg.model, &ck.stats, modality, &ck.classes, workers())?;
            let report = evaluate(&ck.state.model, &samples, modality, &[], bs)?;
            println!("accuracy {:.4}, macro mAP {:.4}", report.top1_accuracy, report.macro_map);
            write_json(&out.join(METRICS), &report)?;
        }
        Protocol::LowLight => {
            let clips = nonempty(ds.load_split_with(Split::Test, parts)?, Split::Test)?;
            let levels = protocol_low_light(
                &ck.state.model,
                &ck.stats,
                &clips,
                &ck.classes,
                modality,
                &cfg.protocol.light_levels,
                &cfg.protocol.low_light_noise,
                bs,
            )?;
            let rows: Vec<(String, &MetricsReport)> =
                levels.iter().map(|l| (format!("light_level={}", l.light_level), &l.report)).collect();
            for (c, r) in &rows {
                println!("{c}: accuracy {:.4}", r.top1_accuracy);
            }
            write_sweep(&out.join(SWEEP), &rows)?;
            write_json(&out.join(METRICS), &levels)?;
        }
        Protocol::DeviceMissing => {
            let classes = ds.class_names()?;
            let train_clips = nonempty(ds.load_split_with(Split::Train, parts)?, Split::Train)?;
            let test_clips = nonempty(ds.load_split_with(Split::Test, parts)?, Split::Test)?;
            let train = make_samples(&train_clips, &cfg.model, &ck.stats, modality, &classes, workers())?;
            let test = make_samples(&test_clips, &cfg.model, &ck.stats, modality, &classes, workers())?;
            let report = protocol_device_missing(
                &ck.state.model,
                &train,
                &test,
                classes.len(),
                &cfg.finetune,
                &cfg.protocol.missing_devices,
            )?;
            let rows = vec![
                ("all_devices".to_string(), &report.all_devices),
                (format!("missing={}", report.missing_devices.join("+")), &report.with_missing),
            ];
            println!(
                "accuracy {:.4} -> {:.4} (relative drop {:.4})",
                report.all_devices.top1_accuracy, report.with_missing.top1_accuracy, report.relative_drop
            );
            write_sweep(&out.join(SWEEP), &rows)?;
            write_json(&out.join(METRICS), &report)?;
        }
        Protocol::CrossDataset => {
            let classes = ds.class_names()?;
            let train = nonempty(ds.load_split_with(Split::Train, parts)?, Split::Train)?;
            let test = nonempty(ds.load_split_with(Split::Test, parts)?, Split::Test)?;
            let target = TargetSet { train: &train, test: &test, classes: &classes };
            let run = finetune_on_target(&ck.state.model, &target, &cfg.finetune, workers())?;
            println!("accuracy {:.4}, macro mAP {:.4}", run.report.top1_accuracy, run.report.macro_map);
            write_sweep(&out.join(SWEEP), &[("cross_dataset".to_string(), &run.report)])?;
            let report = CrossDatasetReport { pretrain_stats: ck.stats, finetune_stats: run.stats, report: run.report };
            write_json(&out.join(METRICS), &report)?;
        }
    }
    let summary = RunSummary {
        command: "eval".into(),
        modality,
        pretrained,
        graph,
        seed: cfg.seed,
        protocol: Some(protocol),
        checkpoint: Some(checkpoint.to_path_buf()),
        steps: None,
        initial_loss: None,
        final_loss: None,
        best_epoch: None,
    };
    write_json(&out.join(RUN_SUMMARY), &summary)
}

/// Markdown table of accuracy and mAP per run directory; unreadable runs
/// get a row marked invalid.
pub fn report(dirs: &[PathBuf]) -> String {
    let mut lines =
        vec!["| Run | Modality | Pretrain | Graph | Acc | mAP |".to_string(), "|---|---|---|---|---|---|".to_string()];
    let mark = |b: Option<bool>| match b {
        Some(true) => "✓",
        Some(false) => "✗",
        None => "?",
    };
    for dir in dirs {
        let read = |name: &str| fs::read_to_string(dir.join(name)).ok();
        let summary: Option<RunSummary> = read(RUN_SUMMARY).and_then(|t| serde_json::from_str(&t).ok());
        let metrics: Option<MetricsReport> = read(METRICS).and_then(|t| serde_json::from_str(&t).ok());
        let name = dir.display();
        lines.push(match (summary, metrics) {
            (Some(s), Some(m)) => format!(
                "| {name} | {} | {} | {} | {:.4} | {:.4} |",
                s.modality.as_str(),
                mark(s.pretrained),
                mark(Some(s.graph)),
                m.top1_accuracy,
                m.macro_map
            ),
            _ => format!("| {name} | invalid | | | | |"),
        });
    }
    lines.join("\n") + "\n"
}
