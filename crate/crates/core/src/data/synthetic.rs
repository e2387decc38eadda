//! Synthetic correlated video + IMU clips with known class structure.
//!
//! Class `c` oscillates at `class_frequency(c)` on the coupled devices, and a
//! bright blob in the video moves along the class direction `π·c/C` with the
//! same frequency. The blob phase equals the coupled-device phase plus
//! `(1 − correlation_strength)·U(−π, π)`, so strength 1 phase-locks the two
//! modalities and strength 0 makes them independent. Uncoupled devices carry a
//! coarser frequency shared by class pairs `(0,1)`, `(2,3)`, …; they only
//! separate the pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_clip, write_splits, ClipManifest, DeviceSpec, ImuRecording, RawClip, Split, VideoFrames};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

pub const DEFAULT_COUPLED_DEVICES: [&str; 2] = ["left_wrist", "left_ankle"];

const BASE_FREQUENCY_HZ: f64 = 1.5;
const FREQUENCY_STEP_HZ: f64 = 2.0;
const IMU_AMPLITUDE: f64 = 2.0;
const GRAVITY: f64 = 9.81;
const BACKGROUND: f64 = 0.15;
const BLOB_PEAK: f64 = 0.8;
const VIDEO_NOISE_SCALE: f64 = 0.2;

/// Oscillation frequency of class `c` on the coupled devices.
pub fn class_frequency(c: usize) -> f64 {
    BASE_FREQUENCY_HZ + FREQUENCY_STEP_HZ * c as f64
}

fn uncoupled_frequency(c: usize) -> f64 {
    class_frequency(c - c % 2)
}

fn default_coupled() -> Vec<String> {
    DEFAULT_COUPLED_DEVICES.iter().map(|s| s.to_string()).collect()
}

fn default_split_fractions() -> (f64, f64) {
    (0.6, 0.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub video_fps: f64,
    /// `(height, width)`
    pub frame_size: (usize, usize),
    pub devices: Vec<DeviceSpec>,
    pub correlation_strength: f64,
    pub noise_level: f64,
    pub seed: u64,
    /// Devices whose oscillation carries the class frequency and drives the blob.
    /// Falls back to every device when none of the listed ids is present.
    #[serde(default = "default_coupled")]
    pub coupled_devices: Vec<String>,
    /// Fractions of each class assigned to `train` and `val`; the rest is `test`.
    #[serde(default = "default_split_fractions")]
    pub split_fractions: (f64, f64),
}

impl SyntheticSpec {
    /// Four limb devices at 50 Hz, 2 s clips at 8 fps and 64×64.
    pub fn desk(seed: u64) -> Self {
        Self {
            num_classes: 4,
            clips_per_class: 10,
            duration_s: 2.0,
            video_fps: 8.0,
            frame_size: (64, 64),
            devices: ["left_wrist", "right_wrist", "left_ankle", "right_ankle"]
                .iter()
                .map(|id| DeviceSpec::new(*id, 50.0))
                .collect(),
            correlation_strength: 1.0,
            noise_level: 0.0,
            seed,
            coupled_devices: default_coupled(),
            split_fractions: default_split_fractions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.clips_per_class == 0 {
            return bad("clips_per_class must be positive".into());
        }
        if !(self.duration_s > 0.0) || !(self.video_fps > 0.0) {
            return bad("duration_s and video_fps must be positive".into());
        }
        if self.frame_size.0 == 0 || self.frame_size.1 == 0 {
            return bad("frame_size must be non-zero".into());
        }
        if !(0.0..=1.0).contains(&self.correlation_strength) {
            return bad(format!("correlation_strength {} outside [0, 1]", self.correlation_strength));
        }
        if !(self.noise_level >= 0.0) {
            return bad("noise_level must be non-negative".into());
        }
        let (tr, va) = self.split_fractions;
        if !(tr >= 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return bad(format!("split fractions {:?} invalid", self.split_fractions));
        }
        if self.devices.is_empty() {
            return bad("at least one device is required".into());
        }
        let mut ids = BTreeSet::new();
        let top = class_frequency(self.num_classes - 1);
        for d in &self.devices {
            if !ids.insert(&d.device_id) {
                return bad(format!("duplicate device {}", d.device_id));
            }
            if !(d.sample_rate_hz > 2.0 * top) {
                return bad(format!(
                    "device {} samples at {} Hz, below twice the top class frequency {top} Hz",
                    d.device_id, d.sample_rate_hz
                ));
            }
        }
        Ok(())
    }

    fn coupled_mask(&self) -> Vec<bool> {
        let mask: Vec<bool> = self.devices.iter().map(|d| self.coupled_devices.contains(&d.device_id)).collect();
        if mask.iter().any(|&m| m) {
            mask
        } else {
            vec![true; self.devices.len()]
        }
    }

    pub fn class_name(c: usize) -> String {
        format!("class_{c:02}")
    }
}

/// Clips plus split membership, before anything touches the disk.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub clips: Vec<RawClip>,
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> Vec<&RawClip> {
        let ids = self.splits.get(&split).cloned().unwrap_or_default();
        ids.iter().filter_map(|id| self.clips.iter().find(|c| &c.manifest.clip_id == id)).collect()
    }
}

/// Unit axis weights of class `c` on device `d`.
fn axis_direction(c: usize, d: usize) -> [f64; 3] {
    let a = 0.7 * c as f64 + 1.3 * d as f64;
    let b = 0.4 * c as f64 - 0.9 * d as f64;
    [a.cos() * b.cos(), a.sin() * b.cos(), b.sin()]
}

fn synthesize_clip(spec: &SyntheticSpec, class: usize, index: usize, split: Split, coupled: &[bool]) -> RawClip {
    let mut rng = rng_for(spec.seed, &[stream::SYNTH, class as u64, index as u64]);
    let freq = class_frequency(class);
    let imu_phase = rng.random_range(0.0..2.0 * PI);
    let video_phase = imu_phase + (1.0 - spec.correlation_strength) * rng.random_range(-PI..PI);
    let imu_noise = Normal::new(0.0, spec.noise_level * IMU_AMPLITUDE).expect("validated noise level");
    let video_noise = Normal::new(0.0, spec.noise_level * VIDEO_NOISE_SCALE).expect("validated noise level");

    let mut imu = Vec::with_capacity(spec.devices.len());
    for (d, device) in spec.devices.iter().enumerate() {
        let (f, phase) = if coupled[d] {
            (freq, imu_phase)
        } else {
            (uncoupled_frequency(class), rng.random_range(0.0..2.0 * PI))
        };
        let amp = IMU_AMPLITUDE * rng.random_range(0.8..1.2);
        let dir = axis_direction(class, d);
        let rows = (spec.duration_s * device.sample_rate_hz).round() as usize;
        let mut timestamps = Vec::with_capacity(rows);
        let mut values = Vec::with_capacity(rows);
        for k in 0..rows {
            let t = k as f64 / device.sample_rate_hz;
            let s = amp * (2.0 * PI * f * t + phase).sin();
            let mut v = [s * dir[0], s * dir[1], s * dir[2] + GRAVITY];
            if spec.noise_level > 0.0 {
                for x in &mut v {
                    *x += imu_noise.sample(&mut rng);
                }
            }
            timestamps.push(t);
            values.push(v);
        }
        imu.push(ImuRecording {
            device_id: device.device_id.clone(),
            sample_rate_hz: device.sample_rate_hz,
            timestamps,
            values,
        });
    }

    let (h, w) = spec.frame_size;
    let frame_count = (spec.duration_s * spec.video_fps).round() as usize;
    let mut frames = VideoFrames::new(frame_count, h, w);
    let theta = PI * class as f64 / spec.num_classes as f64;
    let size = h.min(w) as f64;
    let radius = 0.3 * size;
    let sigma2 = 2.0 * (0.08 * size).powi(2);
    for k in 0..frame_count {
        let t = k as f64 / spec.video_fps;
        let s = (2.0 * PI * freq * t + video_phase).sin();
        let cx = w as f64 / 2.0 + radius * s * theta.cos();
        let cy = h as f64 / 2.0 + radius * s * theta.sin();
        let frame = frames.frame_mut(k);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let mut v = BACKGROUND + BLOB_PEAK * (-(dx * dx + dy * dy) / sigma2).exp();
                if spec.noise_level > 0.0 {
                    v += video_noise.sample(&mut rng);
                }
                let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                let p = (y * w + x) * 3;
                frame[p..p + 3].fill(q);
            }
        }
    }

    let manifest = ClipManifest {
        clip_id: format!("clip_{class:02}_{index:03}"),
        duration_s: spec.duration_s,
        video_fps: spec.video_fps,
        frame_count,
        frame_size: spec.frame_size,
        devices: spec.devices.clone(),
        label: Some(SyntheticSpec::class_name(class)),
        split,
    };
    RawClip { manifest, frames, imu }
}

/// Build every clip in memory. Deterministic in `spec` (including its seed).
pub fn synthesize_clips(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let coupled = spec.coupled_mask();
    let n = spec.clips_per_class;
    let n_train = (n as f64 * spec.split_fractions.0).round() as usize;
    let n_val = ((n as f64 * spec.split_fractions.1).round() as usize).min(n - n_train.min(n));
    let mut clips = Vec::with_capacity(spec.num_classes * n);
    let mut splits: BTreeMap<Split, Vec<String>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for class in 0..spec.num_classes {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(spec.seed, &[stream::SPLIT, class as u64]));
        let mut home = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            home[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, &split) in home.iter().enumerate() {
            let clip = synthesize_clip(spec, class, i, split, &coupled);
            let id = clip.manifest.clip_id.clone();
            splits.get_mut(&split).expect("all splits present").push(id.clone());
            if split != Split::Test {
                splits.get_mut(&Split::Pretrain).expect("all splits present").push(id);
            }
            clips.push(clip);
        }
    }
    Ok(SyntheticDataset { clips, splits })
}

/// Write a synthetic dataset in the canonical layout; returns the clip count.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, root: &Path) -> Result<usize> {
    let data = synthesize_clips(spec)?;
    let clip_root = root.join("clips");
    fs::create_dir_all(&clip_root).map_err(|e| Error::io(&clip_root, e))?;
    for clip in &data.clips {
        write_clip(clip, &clip_root.join(&clip.manifest.clip_id))?;
    }
    write_splits(root, &data.splits)?;
    Ok(data.clips.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    /// Frequency (Hz) of the strongest non-DC DFT bin summed over axes.
    fn dominant_frequency(rec: &ImuRecording) -> f64 {
        let n = rec.values.len();
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut power = vec![0.0; n / 2 + 1];
        for axis in 0..3 {
            let mean = rec.values.iter().map(|v| v[axis]).sum::<f64>() / n as f64;
            let mut buf: Vec<Complex<f64>> = rec.values.iter().map(|v| Complex::new(v[axis] - mean, 0.0)).collect();
            fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p += c.norm_sqr();
            }
        }
        let k = (1..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
        k as f64 * rec.sample_rate_hz / n as f64
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    /// Per-clip correlation between the blob's displacement along the class
    /// direction (measured from pixel intensities) and the coupled IMU signal.
    fn video_imu_correlation(clip: &RawClip, class: usize, num_classes: usize) -> f64 {
        let f = &clip.frames;
        let theta = PI * class as f64 / num_classes as f64;
        let rec = clip.imu_for("left_wrist").unwrap();
        let dir = axis_direction(class, 0);
        let mut disp = Vec::new();
        let mut sig = Vec::new();
        for k in 0..f.frames {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for y in 0..f.height {
                for x in 0..f.width {
                    let v = (f.get(k, y, x, 0) as f64 / 255.0 - BACKGROUND).max(0.0);
                    sx += v * (x as f64 + 0.5);
                    sy += v * (y as f64 + 0.5);
                    sw += v;
                }
            }
            let (cx, cy) = (sx / sw - f.width as f64 / 2.0, sy / sw - f.height as f64 / 2.0);
            disp.push(cx * theta.cos() + cy * theta.sin());
            let t = k as f64 / clip.manifest.video_fps;
            let j = (t * rec.sample_rate_hz).round() as usize;
            let v = rec.values[j.min(rec.values.len() - 1)];
            sig.push(v[0] * dir[0] + v[1] * dir[1] + (v[2] - GRAVITY) * dir[2]);
        }
        pearson(&disp, &sig)
    }

    #[test]
    fn dominant_frequency_identifies_class() {
        let spec = SyntheticSpec { clips_per_class: 10, ..SyntheticSpec::desk(3) };
        let data = synthesize_clips(&spec).unwrap();
        assert_eq!(data.clips.len(), 40);
        for clip in &data.clips {
            let class: usize = clip.manifest.label.as_ref().unwrap()[6..].parse().unwrap();
            for id in DEFAULT_COUPLED_DEVICES {
                assert_eq!(dominant_frequency(clip.imu_for(id).unwrap()), class_frequency(class));
            }
        }
    }

    #[test]
    fn nearest_frequency_classifier_is_perfect_without_noise() {
        let spec = SyntheticSpec { num_classes: 6, clips_per_class: 5, ..SyntheticSpec::desk(11) };
        let data = synthesize_clips(&spec).unwrap();
        let mut correct = 0;
        for clip in &data.clips {
            let f = dominant_frequency(clip.imu_for("left_wrist").unwrap());
            let predicted = (0..spec.num_classes)
                .min_by(|&a, &b| (class_frequency(a) - f).abs().total_cmp(&(class_frequency(b) - f).abs()))
                .unwrap();
            if clip.manifest.label.as_deref() == Some(SyntheticSpec::class_name(predicted).as_str()) {
                correct += 1;
            }
        }
        assert_eq!(correct, data.clips.len());
    }

    #[test]
    fn zero_coupling_decorrelates_video_from_imu() {
        let spec = SyntheticSpec {
            num_classes: 2,
            clips_per_class: 50,
            correlation_strength: 0.0,
            frame_size: (32, 32),
            video_fps: 30.0,
            ..SyntheticSpec::desk(5)
        };
        let data = synthesize_clips(&spec).unwrap();
        let rho: f64 = data
            .clips
            .iter()
            .map(|c| {
                let class: usize = c.manifest.label.as_ref().unwrap()[6..].parse().unwrap();
                video_imu_correlation(c, class, 2)
            })
            .sum::<f64>()
            / data.clips.len() as f64;
        assert!(rho.abs() < 0.1, "mean correlation {rho}");

        let coupled = SyntheticSpec { correlation_strength: 1.0, ..spec };
        let data = synthesize_clips(&coupled).unwrap();
        let rho: f64 =
            data.clips.iter().take(10).map(|c| video_imu_correlation(c, 0, 2)).sum::<f64>() / 10.0;
        assert!(rho > 0.9, "coupled correlation {rho}");
    }

    #[test]
    fn same_seed_gives_identical_directories() {
        let spec = SyntheticSpec { clips_per_class: 2, frame_size: (16, 16), ..SyntheticSpec::desk(9) };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert_eq!(generate_synthetic_dataset(&spec, a.path()).unwrap(), 8);
        generate_synthetic_dataset(&spec, b.path()).unwrap();
        let listing = |root: &Path| {
            let mut files: Vec<_> = walk(root).into_iter().map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap())).collect();
            files.sort();
            files
        };
        assert_eq!(listing(a.path()), listing(b.path()));
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn splits_partition_the_clips() {
        let spec = SyntheticSpec { clips_per_class: 10, ..SyntheticSpec::desk(1) };
        let data = synthesize_clips(&spec).unwrap();
        let count = |s| data.splits[&s].len();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (24, 8, 8));
        assert_eq!(count(Split::Pretrain), 32);
        for clip in &data.clips {
            let listed: Vec<_> = [Split::Train, Split::Val, Split::Test]
                .into_iter()
                .filter(|s| data.splits[s].contains(&clip.manifest.clip_id))
                .collect();
            assert_eq!(listed, vec![clip.manifest.split]);
        }
    }

    #[test]
    fn rejects_single_class() {
        let spec = SyntheticSpec { num_classes: 1, ..SyntheticSpec::desk(0) };
        assert!(matches!(synthesize_clips(&spec), Err(Error::InvalidParam(_))));
    }
}
