//! Raw acceleration → log-magnitude spectrogram → 16×16 patch tokens.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{ImuRecording, RawClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ImuSeries {
    pub device_id: String,
    pub sample_rate_hz: f64,
    pub timestamps: Vec<f64>,
    pub values: Vec<[f64; 3]>,
}

impl ImuSeries {
    pub fn from_recording(rec: &ImuRecording) -> Self {
        Self {
            device_id: rec.device_id.clone(),
            sample_rate_hz: rec.sample_rate_hz,
            timestamps: rec.timestamps.clone(),
            values: rec.values.clone(),
        }
    }

    /// Uniformly sampled series starting at t = 0.
    pub fn uniform(device_id: impl Into<String>, sample_rate_hz: f64, values: Vec<[f64; 3]>) -> Self {
        let timestamps = (0..values.len()).map(|i| i as f64 / sample_rate_hz).collect();
        Self { device_id: device_id.into(), sample_rate_hz, timestamps, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn axis(&self, a: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[a]).collect()
    }

    /// Nominal duration `len / rate`.
    pub fn duration(&self) -> f64 {
        self.values.len() as f64 / self.sample_rate_hz
    }

    fn check_len(&self) -> Result<()> {
        if self.values.len() < 2 || self.timestamps.len() != self.values.len() {
            return Err(Error::Shape(format!("device {}: need at least 2 aligned samples", self.device_id)));
        }
        Ok(())
    }
}

/// Fill NaNs by linear interpolation in time; leading/trailing runs copy the
/// nearest finite sample.
pub fn clean(series: &ImuSeries) -> Result<ImuSeries> {
    series.check_len()?;
    let mut out = series.clone();
    let t = &series.timestamps;
    for axis in 0..3 {
        let finite: Vec<usize> = (0..series.len()).filter(|&i| series.values[i][axis].is_finite()).collect();
        let (Some(&first), Some(&last)) = (finite.first(), finite.last()) else {
            return Err(Error::AllNan { device: series.device_id.clone(), axis });
        };
        for i in 0..first {
            out.values[i][axis] = series.values[first][axis];
        }
        for i in last + 1..series.len() {
            out.values[i][axis] = series.values[last][axis];
        }
        for pair in finite.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (series.values[a][axis], series.values[b][axis]);
            for i in a + 1..b {
                let w = (t[i] - t[a]) / (t[b] - t[a]);
                out.values[i][axis] = va + w * (vb - va);
            }
        }
    }
    Ok(out)
}

/// Linear interpolation onto `target_samples` points spanning the original
/// first-to-last timestamp range.
pub fn resample(series: &ImuSeries, target_samples: usize) -> Result<ImuSeries> {
    if target_samples < 2 {
        return Err(Error::InvalidParam(format!("target_samples must be >= 2, got {target_samples}")));
    }
    series.check_len()?;
    let t = &series.timestamps;
    let (t0, t1) = (t[0], t[t.len() - 1]);
    let step = (t1 - t0) / (target_samples - 1) as f64;
    let mut values = Vec::with_capacity(target_samples);
    let mut timestamps = Vec::with_capacity(target_samples);
    let mut seg = 0;
    for j in 0..target_samples {
        let tj = if j == target_samples - 1 { t1 } else { t0 + j as f64 * step };
        while seg + 2 < t.len() && t[seg + 1] <= tj {
            seg += 1;
        }
        let (a, b) = (seg, seg + 1);
        let span = t[b] - t[a];
        let w = if span > 0.0 { ((tj - t[a]) / span).clamp(0.0, 1.0) } else { 0.0 };
        let (va, vb) = (series.values[a], series.values[b]);
        values.push([0, 1, 2].map(|k| if w == 0.0 { va[k] } else { va[k] + w * (vb[k] - va[k]) }));
        timestamps.push(tj);
    }
    Ok(ImuSeries {
        device_id: series.device_id.clone(),
        sample_rate_hz: target_samples as f64 / series.duration(),
        timestamps,
        values,
    })
}

/// Dataset-level per-axis normalisation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Population mean and std of every sample of every series, per axis.
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a ImuSeries>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 3];
        let all: Vec<&ImuSeries> = series.into_iter().collect();
        for s in &all {
            for v in &s.values {
                for k in 0..3 {
                    sum[k] += v[k];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidParam("cannot fit normalisation stats on no samples".into()));
        }
        let mean = sum.map(|x| x / n as f64);
        let mut sq = [0.0; 3];
        for s in &all {
            for v in &s.values {
                for k in 0..3 {
                    sq[k] += (v[k] - mean[k]).powi(2);
                }
            }
        }
        Ok(Self { mean, std: sq.map(|x| (x / n as f64).sqrt()) })
    }
}

pub fn normalize(series: &ImuSeries, stats: &NormStats) -> ImuSeries {
    let mut out = series.clone();
    for v in &mut out.values {
        for k in 0..3 {
            v[k] = (v[k] - stats.mean[k]) / stats.std[k].max(STD_FLOOR);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftParams {
    /// Resampled series length fed to the transform.
    pub target_samples: usize,
    pub window: WindowKind,
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub log_offset: f64,
    /// Output time frames (T_imu).
    pub frames: usize,
    /// Output frequency bins (M_imu).
    pub bins: usize,
}

impl StftParams {
    /// 160 × 128 spectrogram from 160 samples.
    pub fn paper() -> Self {
        Self {
            target_samples: 160,
            window: WindowKind::Hann,
            window_len: 16,
            hop: 1,
            fft_len: 254,
            log_offset: 1e-6,
            frames: 160,
            bins: 128,
        }
    }

    /// 32 × 32 spectrogram from 64 samples.
    pub fn desk() -> Self {
        Self {
            target_samples: 64,
            window: WindowKind::Hann,
            window_len: 32,
            hop: 2,
            fft_len: 62,
            log_offset: 1e-6,
            frames: 32,
            bins: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Shape(m));
        if self.window_len == 0 || self.hop == 0 || self.fft_len == 0 {
            return fail("window_len, hop and fft_len must be positive".into());
        }
        if self.window_len > self.fft_len {
            return fail(format!("window_len {} exceeds fft_len {}", self.window_len, self.fft_len));
        }
        let pad = self.window_len / 2;
        if pad >= self.target_samples {
            return fail("reflect padding needs target_samples > window_len / 2".into());
        }
        let available = 1 + (self.target_samples + 2 * pad - self.window_len) / self.hop;
        if self.frames == 0 || self.frames > available {
            return fail(format!("{} frames requested, {available} available", self.frames));
        }
        if self.bins == 0 || self.bins > self.fft_len / 2 + 1 {
            return fail(format!("{} bins requested, fft_len {} gives {}", self.bins, self.fft_len, self.fft_len / 2 + 1));
        }
        if !(self.log_offset > 0.0) {
            return Err(Error::InvalidParam("log_offset must be positive".into()));
        }
        Ok(())
    }

    fn window_coeffs(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }
}

/// `frames × bins × 3` log-magnitude image, stored `(time, freq, axis)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub device_id: String,
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    #[inline]
    pub fn get(&self, t: usize, f: usize, axis: usize) -> f64 {
        self.data[(t * self.bins + f) * 3 + axis]
    }

    /// Frequency bin with the largest time-averaged value on one axis.
    pub fn peak_bin(&self, axis: usize) -> usize {
        (0..self.bins)
            .max_by(|&a, &b| {
                let sa: f64 = (0..self.frames).map(|t| self.get(t, a, axis)).sum();
                let sb: f64 = (0..self.frames).map(|t| self.get(t, b, axis)).sum();
                sa.total_cmp(&sb)
            })
            .unwrap_or(0)
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

/// Windowed frames of one axis after reflect padding, each zero-padded to `fft_len`.
pub fn windowed_frames(signal: &[f64], params: &StftParams) -> Vec<Vec<f64>> {
    let pad = (params.window_len / 2) as isize;
    let window = params.window_coeffs();
    (0..params.frames)
        .map(|t| {
            let start = (t * params.hop) as isize - pad;
            let mut frame = vec![0.0; params.fft_len];
            for (k, w) in window.iter().enumerate() {
                frame[k] = w * signal[reflect_index(start + k as isize, signal.len())];
            }
            frame
        })
        .collect()
}

/// Magnitudes of the first `bins` DFT bins of every windowed frame, `(time, freq)`.
pub fn stft_magnitudes(signal: &[f64], params: &StftParams) -> Result<Vec<f64>> {
    params.validate()?;
    if signal.len() != params.target_samples {
        return Err(Error::Shape(format!("signal has {} samples, expected {}", signal.len(), params.target_samples)));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.fft_len);
    let mut out = Vec::with_capacity(params.frames * params.bins);
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_len];
    for frame in windowed_frames(signal, params) {
        for (b, x) in buf.iter_mut().zip(&frame) {
            *b = Complex::new(*x, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..params.bins].iter().map(|c| c.norm()));
    }
    Ok(out)
}

pub fn stft_spectrogram(series: &ImuSeries, params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    if series.len() != params.target_samples {
        return Err(Error::Shape(format!(
            "device {}: {} samples, expected {}",
            series.device_id,
            series.len(),
            params.target_samples
        )));
    }
    let mut data = vec![0.0; params.frames * params.bins * 3];
    for axis in 0..3 {
        let mags = stft_magnitudes(&series.axis(axis), params)?;
        for (i, m) in mags.iter().enumerate() {
            data[i * 3 + axis] = (params.log_offset + m).ln();
        }
    }
    Ok(Spectrogram { device_id: series.device_id.clone(), frames: params.frames, bins: params.bins, data })
}

/// Patch tokens of all devices, ordered `(device, time cell, freq cell)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuPatchGrid {
    /// `P_imu × (patch · patch · 3)`, each row flattened `(time, freq, axis)`.
    pub patches: Tensor,
    pub device_index: Vec<usize>,
    /// `(time cell, freq cell)` per patch.
    pub grid_pos: Vec<(usize, usize)>,
    pub patch: usize,
    pub time_cells: usize,
    pub freq_cells: usize,
    pub devices: usize,
}

impl ImuPatchGrid {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }

    pub fn cells_per_device(&self) -> usize {
        self.time_cells * self.freq_cells
    }
}

pub fn patchify_imu(specs: &[Spectrogram], patch: usize) -> Result<ImuPatchGrid> {
    let Some(first) = specs.first() else {
        return Err(Error::Shape("no spectrograms to patchify".into()));
    };
    let (frames, bins) = (first.frames, first.bins);
    if patch == 0 || frames % patch != 0 || bins % patch != 0 {
        return Err(Error::Shape(format!("{frames}x{bins} spectrogram is not divisible into {patch}x{patch} patches")));
    }
    if specs.iter().any(|s| s.frames != frames || s.bins != bins) {
        return Err(Error::Shape("spectrograms differ in shape".into()));
    }
    let (tc, fc) = (frames / patch, bins / patch);
    let dim = patch * patch * 3;
    let count = specs.len() * tc * fc;
    let mut data = Vec::with_capacity(count * dim);
    let mut device_index = Vec::with_capacity(count);
    let mut grid_pos = Vec::with_capacity(count);
    for (d, s) in specs.iter().enumerate() {
        for ti in 0..tc {
            for fi in 0..fc {
                for dt in 0..patch {
                    for df in 0..patch {
                        for axis in 0..3 {
                            data.push(s.get(ti * patch + dt, fi * patch + df, axis));
                        }
                    }
                }
                device_index.push(d);
                grid_pos.push((ti, fi));
            }
        }
    }
    Ok(ImuPatchGrid {
        patches: Tensor::from_vec(count, dim, data),
        device_index,
        grid_pos,
        patch,
        time_cells: tc,
        freq_cells: fc,
        devices: specs.len(),
    })
}

/// Inverse of [`patchify_imu`]; device ids are taken from `names`.
pub fn unpatchify_imu(grid: &ImuPatchGrid, names: &[String]) -> Result<Vec<Spectrogram>> {
    if names.len() != grid.devices || grid.patches.rows() != grid.devices * grid.cells_per_device() {
        return Err(Error::Shape("patch grid does not match device list".into()));
    }
    let p = grid.patch;
    let (frames, bins) = (grid.time_cells * p, grid.freq_cells * p);
    let mut out: Vec<Spectrogram> = names
        .iter()
        .map(|n| Spectrogram { device_id: n.clone(), frames, bins, data: vec![0.0; frames * bins * 3] })
        .collect();
    for (row, (&d, &(ti, fi))) in grid.device_index.iter().zip(&grid.grid_pos).enumerate() {
        let patch = grid.patches.row(row);
        let mut k = 0;
        for dt in 0..p {
            for df in 0..p {
                for axis in 0..3 {
                    out[d].data[((ti * p + dt) * bins + fi * p + df) * 3 + axis] = patch[k];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Series of `device_ids` taken from a clip, in that order.
pub fn clip_series(clip: &RawClip, device_ids: &[String]) -> Result<Vec<ImuSeries>> {
    device_ids
        .iter()
        .map(|id| {
            clip.imu_for(id)
                .map(ImuSeries::from_recording)
                .ok_or_else(|| Error::UnknownDevice(format!("{id} (not recorded in clip {})", clip.manifest.clip_id)))
        })
        .collect()
}

/// clean → resample, the part of the pipeline that precedes normalisation.
pub fn prepare_series(series: &ImuSeries, params: &StftParams) -> Result<ImuSeries> {
    resample(&clean(series)?, params.target_samples)
}

/// Full pipeline for one clip.
pub fn preprocess_clip_imu(
    clip: &RawClip,
    device_ids: &[String],
    params: &StftParams,
    stats: &NormStats,
    patch: usize,
) -> Result<ImuPatchGrid> {
    let specs = clip_series(clip, device_ids)?
        .iter()
        .map(|s| stft_spectrogram(&normalize(&prepare_series(s, params)?, stats), params))
        .collect::<Result<Vec<_>>>()?;
    let grid = patchify_imu(&specs, patch)?;
    debug_assert_eq!(grid.len(), device_ids.len() * (params.frames / patch) * (params.bins / patch));
    Ok(grid)
}
