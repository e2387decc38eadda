//! Canonical on-disk clip format.
//!
//! A dataset root holds `splits.json` and one directory per clip under
//! `clips/`. Each clip directory contains `manifest.json`,
//! `frames/frame_000000.png …` and one `imu_<device_id>.csv` per device with
//! header `timestamp_s,ax,ay,az`.

mod lowlight;
mod synthetic;

pub use lowlight::degrade_low_light;
pub use synthetic::{
    class_frequency, generate_synthetic_dataset, synthesize_clips, SyntheticDataset, SyntheticSpec, DEFAULT_COUPLED_DEVICES,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AXES: [&str; 3] = ["x", "y", "z"];
pub const CSV_HEADER: &str = "timestamp_s,ax,ay,az";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub device_id: String,
    pub sample_rate_hz: f64,
    #[serde(default = "default_axes")]
    pub axes: Vec<String>,
}

fn default_axes() -> Vec<String> {
    AXES.iter().map(|s| s.to_string()).collect()
}

impl DeviceSpec {
    pub fn new(device_id: impl Into<String>, sample_rate_hz: f64) -> Self {
        Self { device_id: device_id.into(), sample_rate_hz, axes: default_axes() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub clip_id: String,
    pub duration_s: f64,
    pub video_fps: f64,
    pub frame_count: usize,
    /// `(height, width)`
    pub frame_size: (usize, usize),
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub label: Option<String>,
    pub split: Split,
}

impl ClipManifest {
    pub fn expected_imu_rows(&self, device: &DeviceSpec) -> f64 {
        self.duration_s * device.sample_rate_hz
    }

    pub fn device_ids(&self) -> Vec<&str> {
        self.devices.iter().map(|d| d.device_id.as_str()).collect()
    }
}

/// 8-bit RGB video, `frames × height × width × 3`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrames {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl VideoFrames {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![0; frames * height * width * 3] }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [u8] {
        let n = self.frame_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> u8 {
        self.data[((f * self.height + y) * self.width + x) * 3 + c]
    }
}

/// Raw acceleration samples of one device, sorted by timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuRecording {
    pub device_id: String,
    pub sample_rate_hz: f64,
    pub timestamps: Vec<f64>,
    /// One `[ax, ay, az]` row per timestamp; may contain NaN.
    pub values: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawClip {
    pub manifest: ClipManifest,
    pub frames: VideoFrames,
    /// In manifest device order.
    pub imu: Vec<ImuRecording>,
}

impl RawClip {
    pub fn imu_for(&self, device_id: &str) -> Option<&ImuRecording> {
        self.imu.iter().find(|r| r.device_id == device_id)
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

pub fn imu_file_name(device_id: &str) -> String {
    format!("imu_{device_id}.csv")
}

fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<ClipManifest> {
    let path = dir.join("manifest.json");
    let text = read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path, message: e.to_string() })
}

/// Which modalities to read from a clip directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadParts {
    pub video: bool,
    pub imu: bool,
}

impl LoadParts {
    pub const ALL: LoadParts = LoadParts { video: true, imu: true };
}

/// Load and check one clip directory.
pub fn load_clip(dir: &Path) -> Result<RawClip> {
    load_clip_with(dir, LoadParts::ALL)
}

/// Like [`load_clip`], skipping the modalities not requested: skipped video
/// yields zero frames, skipped IMU an empty recording list, and their files
/// need not exist.
pub fn load_clip_with(dir: &Path, parts: LoadParts) -> Result<RawClip> {
    let manifest = read_manifest(dir)?;
    if parts.imu {
        for device in &manifest.devices {
            let path = dir.join(imu_file_name(&device.device_id));
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
        }
    }
    let (h, w) = manifest.frame_size;
    let mut frames = VideoFrames::new(0, h, w);
    if parts.video {
        let frame_dir = dir.join("frames");
        if !frame_dir.is_dir() {
            return Err(Error::MissingFile(frame_dir));
        }
        let on_disk = count_frame_files(&frame_dir)?;
        if on_disk != manifest.frame_count {
            return Err(Error::ManifestMismatch(format!(
                "{}: manifest declares {} frames, {} found on disk",
                manifest.clip_id, manifest.frame_count, on_disk
            )));
        }
        frames = VideoFrames::new(manifest.frame_count, h, w);
        for i in 0..manifest.frame_count {
            let path = frame_dir.join(frame_file_name(i));
            let pixels = read_png_rgb(&path, h, w)?;
            frames.frame_mut(i).copy_from_slice(&pixels);
        }
    }
    let mut imu = Vec::with_capacity(manifest.devices.len());
    if parts.imu {
        for device in &manifest.devices {
            let rec = read_imu_csv(&dir.join(imu_file_name(&device.device_id)), device)?;
            let expected = manifest.expected_imu_rows(device);
            if (rec.values.len() as f64 - expected).abs() > 1.0 + 1e-9 {
                return Err(Error::ManifestMismatch(format!(
                    "{}: device {} has {} rows, expected {:.1} ± 1",
                    manifest.clip_id,
                    device.device_id,
                    rec.values.len(),
                    expected
                )));
            }
            imu.push(rec);
        }
    }
    Ok(RawClip { manifest, frames, imu })
}

fn count_frame_files(frame_dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(frame_dir).map_err(|e| Error::io(frame_dir, e))?;
    let mut n = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(frame_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("frame_") && name.ends_with(".png") {
            n += 1;
        }
    }
    Ok(n)
}

fn png_error(path: &Path, e: impl fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn read_png_rgb(path: &Path, height: usize, width: usize) -> Result<Vec<u8>> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_error(path, e))?;
    let info = reader.info();
    if info.width as usize != width || info.height as usize != height {
        return Err(Error::ManifestMismatch(format!(
            "{}: frame is {}x{}, manifest says {}x{}",
            path.display(),
            info.height,
            info.width,
            height,
            width
        )));
    }
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(path, "expected 8-bit RGB"));
    }
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_error(path, "image too large"))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    buf.truncate(frame.buffer_size());
    Ok(buf)
}

fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(|e| png_error(path, e))?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

fn write_png_rgb(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(pixels).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))?;
    Ok(())
}

/// Parse `timestamp_s,ax,ay,az` rows; NaN values pass through untouched.
pub fn read_imu_csv(path: &Path, device: &DeviceSpec) -> Result<ImuRecording> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), message: format!("line {line}: {message}") };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Parse { path: path.to_path_buf(), message: e.to_string() },
        })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let header: Vec<&str> = header.iter().collect();
    if header != CSV_HEADER.split(',').collect::<Vec<_>>() {
        return Err(parse_err(1, format!("expected header {CSV_HEADER:?}, found {:?}", header.join(","))));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let mut vals = [0.0; 4];
        for (slot, field) in vals.iter_mut().zip(record.iter()) {
            *slot = field.parse::<f64>().map_err(|_| parse_err(line, format!("not a number: {field:?}")))?;
        }
        if !vals[0].is_finite() {
            return Err(parse_err(line, "timestamp must be finite".into()));
        }
        rows.push((vals[0], [vals[1], vals[2], vals[3]]));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(ImuRecording {
        device_id: device.device_id.clone(),
        sample_rate_hz: device.sample_rate_hz,
        timestamps: rows.iter().map(|r| r.0).collect(),
        values: rows.into_iter().map(|r| r.1).collect(),
    })
}

fn fmt_sig9(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.8e}")
    }
}

pub fn write_imu_csv(path: &Path, rec: &ImuRecording) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{CSV_HEADER}").map_err(io)?;
    for (t, v) in rec.timestamps.iter().zip(&rec.values) {
        writeln!(out, "{},{},{},{}", fmt_sig9(*t), fmt_sig9(v[0]), fmt_sig9(v[1]), fmt_sig9(v[2])).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Write a clip in the canonical format, creating `dir`.
pub fn write_clip(clip: &RawClip, dir: &Path) -> Result<()> {
    let frame_dir = dir.join("frames");
    fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&clip.manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    let f = &clip.frames;
    for i in 0..f.frames {
        write_png_rgb(&frame_dir.join(frame_file_name(i)), f.height, f.width, f.frame(i))?;
    }
    for rec in &clip.imu {
        write_imu_csv(&dir.join(imu_file_name(&rec.device_id)), rec)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Issue {
    FrameCountFormula { declared: usize, expected: usize },
    FrameFilesOnDisk { declared: usize, found: usize },
    FrameSize { file: PathBuf, found: (usize, usize), declared: (usize, usize) },
    DuplicateDevice(String),
    BadSampleRate(String),
    BadAxes(String),
    MissingImuFile(PathBuf),
    MissingFrameDir(PathBuf),
    ImuRowCount { device: String, found: usize, expected: f64 },
    MissingLabel,
    BadDuration,
    BadFps,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::FrameCountFormula { declared, expected } => {
                write!(f, "frame_count {declared} != round(duration_s * video_fps) = {expected}")
            }
            Issue::FrameFilesOnDisk { declared, found } => write!(f, "frame_count {declared} but {found} frame files on disk"),
            Issue::FrameSize { file, found, declared } => {
                write!(f, "{} is {:?}, manifest frame_size is {:?}", file.display(), found, declared)
            }
            Issue::DuplicateDevice(id) => write!(f, "device_id {id:?} appears more than once"),
            Issue::BadSampleRate(id) => write!(f, "device {id:?} has a non-positive sample rate"),
            Issue::BadAxes(id) => write!(f, "device {id:?} must list axes [x, y, z]"),
            Issue::MissingImuFile(p) => write!(f, "missing IMU file {}", p.display()),
            Issue::MissingFrameDir(p) => write!(f, "missing frame directory {}", p.display()),
            Issue::ImuRowCount { device, found, expected } => {
                write!(f, "device {device:?} has {found} rows, expected {expected:.1} ± 1")
            }
            Issue::MissingLabel => write!(f, "labeled split requires a label"),
            Issue::BadDuration => write!(f, "duration_s must be positive"),
            Issue::BadFps => write!(f, "video_fps must be positive"),
        }
    }
}

/// Every violated manifest invariant; empty means the clip is loadable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

pub fn validate_manifest(manifest: &ClipManifest, root: &Path) -> ValidationReport {
    let mut issues = Vec::new();
    if !(manifest.duration_s > 0.0) {
        issues.push(Issue::BadDuration);
    }
    if !(manifest.video_fps > 0.0) {
        issues.push(Issue::BadFps);
    }
    let expected = (manifest.duration_s * manifest.video_fps).round();
    if expected.is_finite() && expected >= 0.0 && manifest.frame_count != expected as usize {
        issues.push(Issue::FrameCountFormula { declared: manifest.frame_count, expected: expected as usize });
    }
    let frame_dir = root.join("frames");
    if frame_dir.is_dir() {
        match count_frame_files(&frame_dir) {
            Ok(found) if found != manifest.frame_count => {
                issues.push(Issue::FrameFilesOnDisk { declared: manifest.frame_count, found })
            }
            Ok(_) => {
                for i in 0..manifest.frame_count {
                    let file = frame_dir.join(frame_file_name(i));
                    match png_dimensions(&file) {
                        Ok(dims) if dims != manifest.frame_size => {
                            issues.push(Issue::FrameSize { file, found: dims, declared: manifest.frame_size })
                        }
                        Ok(_) => {}
                        Err(_) => issues.push(Issue::FrameFilesOnDisk { declared: manifest.frame_count, found: i }),
                    }
                }
            }
            Err(_) => issues.push(Issue::MissingFrameDir(frame_dir.clone())),
        }
    } else {
        issues.push(Issue::MissingFrameDir(frame_dir));
    }
    let mut seen = BTreeSet::new();
    for device in &manifest.devices {
        if !seen.insert(device.device_id.as_str()) {
            issues.push(Issue::DuplicateDevice(device.device_id.clone()));
        }
        if !(device.sample_rate_hz > 0.0) {
            issues.push(Issue::BadSampleRate(device.device_id.clone()));
        }
        if device.axes.iter().map(String::as_str).ne(AXES) {
            issues.push(Issue::BadAxes(device.device_id.clone()));
        }
        let path = root.join(imu_file_name(&device.device_id));
        if !path.exists() {
            issues.push(Issue::MissingImuFile(path));
        } else if let Ok(rec) = read_imu_csv(&path, device) {
            let expected = manifest.expected_imu_rows(device);
            if (rec.values.len() as f64 - expected).abs() > 1.0 + 1e-9 {
                issues.push(Issue::ImuRowCount { device: device.device_id.clone(), found: rec.values.len(), expected });
            }
        }
    }
    if manifest.split != Split::Pretrain && manifest.label.is_none() {
        issues.push(Issue::MissingLabel);
    }
    ValidationReport { issues }
}

/// A dataset directory: `splits.json` plus `clips/<clip_id>/`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("splits.json");
        let text = read_to_string(&path)?;
        let splits = serde_json::from_str(&text).map_err(|e| Error::Parse { path, message: e.to_string() })?;
        Ok(Self { root: root.to_path_buf(), splits })
    }

    pub fn clip_dir(&self, clip_id: &str) -> PathBuf {
        self.root.join("clips").join(clip_id)
    }

    pub fn clip_ids(&self, split: Split) -> &[String] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<RawClip>> {
        self.load_split_with(split, LoadParts::ALL)
    }

    pub fn load_split_with(&self, split: Split, parts: LoadParts) -> Result<Vec<RawClip>> {
        self.clip_ids(split).iter().map(|id| load_clip_with(&self.clip_dir(id), parts)).collect()
    }

    /// Class names found among the labeled splits, sorted.
    pub fn class_names(&self) -> Result<Vec<String>> {
        let mut names = BTreeSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.clip_ids(split) {
                if let Some(label) = read_manifest(&self.clip_dir(id))?.label {
                    names.insert(label);
                }
            }
        }
        Ok(names.into_iter().collect())
    }
}

pub fn write_splits(root: &Path, splits: &BTreeMap<Split, Vec<String>>) -> Result<()> {
    let path = root.join("splits.json");
    let text = serde_json::to_string_pretty(splits)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_clip(devices: usize) -> RawClip {
        let manifest = ClipManifest {
            clip_id: "c0".into(),
            duration_s: 2.0,
            video_fps: 60.0,
            frame_count: 120,
            frame_size: (4, 6),
            devices: (0..devices).map(|d| DeviceSpec::new(format!("dev{d}"), 50.0)).collect(),
            label: Some("a".into()),
            split: Split::Train,
        };
        let mut frames = VideoFrames::new(120, 4, 6);
        for (i, p) in frames.data.iter_mut().enumerate() {
            *p = (i * 7 % 256) as u8;
        }
        let imu = manifest
            .devices
            .iter()
            .enumerate()
            .map(|(d, spec)| ImuRecording {
                device_id: spec.device_id.clone(),
                sample_rate_hz: 50.0,
                timestamps: (0..100).map(|k| k as f64 / 50.0).collect(),
                values: (0..100).map(|k| [k as f64 * 0.1 + d as f64, -(k as f64).sqrt(), 9.81]).collect(),
            })
            .collect();
        RawClip { manifest, frames, imu }
    }

    #[test]
    fn load_reports_counts_from_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let clip = tiny_clip(4);
        write_clip(&clip, dir.path()).unwrap();
        let loaded = load_clip(dir.path()).unwrap();
        assert_eq!(loaded.frames.frames, 120);
        assert_eq!(loaded.imu.len(), 4);
        assert!(loaded.imu.iter().all(|r| r.values.len() == 100));
        assert_eq!(loaded.frames, clip.frames);
        assert_eq!(loaded.manifest, clip.manifest);
        for (a, b) in loaded.imu.iter().zip(&clip.imu) {
            for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
                assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
            }
        }
        assert!(validate_manifest(&loaded.manifest, dir.path()).is_ok());
    }

    #[test]
    fn missing_device_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut clip = tiny_clip(5);
        write_clip(&clip, dir.path()).unwrap();
        fs::remove_file(dir.path().join("imu_dev4.csv")).unwrap();
        clip.imu.pop();
        match load_clip(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("imu_dev4.csv")),
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn partial_loads_ignore_the_other_modality() {
        let dir = tempfile::tempdir().unwrap();
        let clip = tiny_clip(2);
        write_clip(&clip, dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join("frames")).unwrap();
        let imu_only = load_clip_with(dir.path(), LoadParts { video: false, imu: true }).unwrap();
        assert_eq!(imu_only.frames.frames, 0);
        assert_eq!(imu_only.imu, clip.imu.iter().map(|r| read_back(r)).collect::<Vec<_>>());
        assert!(matches!(load_clip(dir.path()), Err(Error::MissingFile(_))));

        let dir = tempfile::tempdir().unwrap();
        write_clip(&clip, dir.path()).unwrap();
        fs::remove_file(dir.path().join("imu_dev0.csv")).unwrap();
        let video_only = load_clip_with(dir.path(), LoadParts { video: true, imu: false }).unwrap();
        assert_eq!(video_only.frames, clip.frames);
        assert!(video_only.imu.is_empty());
    }

    /// The recording as it reads back after a CSV round trip.
    fn read_back(rec: &ImuRecording) -> ImuRecording {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_imu_csv(&path, rec).unwrap();
        read_imu_csv(&path, &DeviceSpec::new(rec.device_id.clone(), rec.sample_rate_hz)).unwrap()
    }

    #[test]
    fn nan_rows_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.csv");
        fs::write(&path, "timestamp_s,ax,ay,az\n0.02,0.1,nan,9.8\n0.0,1,2,3\n").unwrap();
        let rec = read_imu_csv(&path, &DeviceSpec::new("d", 50.0)).unwrap();
        assert_eq!(rec.timestamps, vec![0.0, 0.02]);
        assert!(rec.values[1][1].is_nan());
        assert_eq!(rec.values[1][2], 9.8);
    }

    #[test]
    fn malformed_row_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.csv");
        fs::write(&path, "timestamp_s,ax,ay,az\n0.0,1,two,3\n").unwrap();
        assert!(matches!(read_imu_csv(&path, &DeviceSpec::new("d", 50.0)), Err(Error::Parse { .. })));
    }

    #[test]
    fn frame_count_mismatch_is_reported_once() {
        let dir = tempfile::tempdir().unwrap();
        let clip = tiny_clip(2);
        write_clip(&clip, dir.path()).unwrap();
        let mut m = clip.manifest.clone();
        m.frame_count = 119;
        m.duration_s = 119.0 / 60.0;
        m.devices.iter_mut().for_each(|d| d.sample_rate_hz = 100.0 / m.duration_s);
        let report = validate_manifest(&m, dir.path());
        assert_eq!(report.issues, vec![Issue::FrameFilesOnDisk { declared: 119, found: 120 }]);
        assert!(matches!(load_clip(dir.path()), Ok(_)));
        let path = dir.path().join("manifest.json");
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_clip(dir.path()), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn duplicate_device_is_reported_once() {
        let dir = tempfile::tempdir().unwrap();
        let clip = tiny_clip(2);
        write_clip(&clip, dir.path()).unwrap();
        let mut m = clip.manifest.clone();
        m.devices[1] = m.devices[0].clone();
        let report = validate_manifest(&m, dir.path());
        assert_eq!(report.issues, vec![Issue::DuplicateDevice("dev0".into())]);
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let json = r#"{"clip_id":"a","duration_s":2,"video_fps":8,"frame_count":16,"frame_size":[8,8],
            "devices":[],"split":"pretrain","extra":1}"#;
        assert!(serde_json::from_str::<ClipManifest>(json).is_err());
    }
}
