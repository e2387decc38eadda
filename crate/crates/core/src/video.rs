//! Frames → fixed-length clip → tubelet tokens.

use serde::{Deserialize, Serialize};

use crate::data::VideoFrames;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `frames × height × width × 3` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl VideoTensor {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![0.0; frames * height * width * 3] }
    }

    #[inline]
    fn offset(&self, f: usize, y: usize, x: usize) -> usize {
        ((f * self.height + y) * self.width + x) * 3
    }

    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(f, y, x) + c]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, c: usize, v: f64) {
        let o = self.offset(f, y, x);
        self.data[o + c] = v;
    }

    pub fn from_frames(frames: &VideoFrames) -> Self {
        Self {
            frames: frames.frames,
            height: frames.height,
            width: frames.width,
            data: frames.data.iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub tubelet: usize,
}

impl VideoConfig {
    pub fn paper() -> Self {
        Self { frames: 16, height: 224, width: 224, patch: 16, tubelet: 2 }
    }

    pub fn desk() -> Self {
        Self { frames: 8, height: 64, width: 64, patch: 16, tubelet: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.tubelet == 0 || self.frames == 0 {
            return Err(Error::Shape("video patch, tubelet and frame count must be positive".into()));
        }
        if self.frames % self.tubelet != 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Shape(format!(
                "{}x{}x{} video does not tile into {}x{}x{} tubelets",
                self.frames, self.height, self.width, self.tubelet, self.patch, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames / self.tubelet, self.height / self.patch, self.width / self.patch)
    }

    pub fn num_tokens(&self) -> usize {
        let (t, h, w) = self.grid();
        t * h * w
    }

    pub fn spatial_cells(&self) -> usize {
        let (_, h, w) = self.grid();
        h * w
    }

    pub fn token_dim(&self) -> usize {
        self.tubelet * self.patch * self.patch * 3
    }
}

/// Indices `round(k·(n−1)/(t_v−1))`, `k = 0..t_v`.
pub fn frame_indices(frame_count: usize, t_v: usize) -> Result<Vec<usize>> {
    if t_v == 0 || frame_count < t_v {
        return Err(Error::TooFewFrames { available: frame_count, requested: t_v });
    }
    if t_v == 1 {
        return Ok(vec![0]);
    }
    let span = (frame_count - 1) as f64;
    Ok((0..t_v).map(|k| (k as f64 * span / (t_v - 1) as f64).round() as usize).collect())
}

pub fn sample_frames(frames: &VideoFrames, t_v: usize) -> Result<VideoTensor> {
    let idx = frame_indices(frames.frames, t_v)?;
    let mut out = VideoTensor::zeros(t_v, frames.height, frames.width);
    let len = frames.frame_len();
    for (k, &src) in idx.iter().enumerate() {
        for (dst, &p) in out.data[k * len..(k + 1) * len].iter_mut().zip(frames.frame(src)) {
            *dst = p as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Bilinear resize (half-pixel centres) so the shorter side equals
/// `max(h, w)`, then a centre crop to `h × w`.
pub fn resize_center_crop(video: &VideoTensor, h: usize, w: usize) -> VideoTensor {
    let (src_h, src_w) = (video.height, video.width);
    let scale = h.max(w) as f64 / src_h.min(src_w) as f64;
    let new_h = ((src_h as f64 * scale).round() as usize).max(h);
    let new_w = ((src_w as f64 * scale).round() as usize).max(w);
    let (oy, ox) = ((new_h - h) / 2, (new_w - w) / 2);
    let (sy, sx) = (src_h as f64 / new_h as f64, src_w as f64 / new_w as f64);
    let taps = |dst: usize, off: usize, ratio: f64, len: usize| {
        let pos = ((dst + off) as f64 + 0.5) * ratio - 0.5;
        let pos = pos.clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let ys: Vec<_> = (0..h).map(|y| taps(y, oy, sy, src_h)).collect();
    let xs: Vec<_> = (0..w).map(|x| taps(x, ox, sx, src_w)).collect();
    let mut out = VideoTensor::zeros(video.frames, h, w);
    for f in 0..video.frames {
        for (y, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
                for c in 0..3 {
                    let top = video.get(f, y0, x0, c) * (1.0 - wx) + video.get(f, y0, x1, c) * wx;
                    let bottom = video.get(f, y1, x0, c) * (1.0 - wx) + video.get(f, y1, x1, c) * wx;
                    let v = if wy == 0.0 { top } else { top * (1.0 - wy) + bottom * wy };
                    out.set(f, y, x, c, v);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoPatchGrid {
    /// `P_v × (tubelet · patch · patch · 3)`, rows flattened `(t, y, x, channel)`.
    pub patches: Tensor,
    /// `(t, h, w)` cell per token.
    pub grid_pos: Vec<(usize, usize, usize)>,
    pub tubelet: usize,
    pub patch: usize,
    pub grid: (usize, usize, usize),
}

impl VideoPatchGrid {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }

    pub fn spatial_cells(&self) -> usize {
        self.grid.1 * self.grid.2
    }
}

pub fn tubelet_patchify(video: &VideoTensor, tubelet: usize, patch: usize) -> Result<VideoPatchGrid> {
    if tubelet == 0
        || patch == 0
        || video.frames % tubelet != 0
        || video.height % patch != 0
        || video.width % patch != 0
    {
        return Err(Error::Shape(format!(
            "{}x{}x{} video does not tile into {tubelet}x{patch}x{patch} tubelets",
            video.frames, video.height, video.width
        )));
    }
    let grid = (video.frames / tubelet, video.height / patch, video.width / patch);
    let dim = tubelet * patch * patch * 3;
    let count = grid.0 * grid.1 * grid.2;
    let mut data = Vec::with_capacity(count * dim);
    let mut grid_pos = Vec::with_capacity(count);
    for t in 0..grid.0 {
        for gy in 0..grid.1 {
            for gx in 0..grid.2 {
                grid_pos.push((t, gy, gx));
                for dt in 0..tubelet {
                    for dy in 0..patch {
                        let o = video.offset(t * tubelet + dt, gy * patch + dy, gx * patch);
                        data.extend_from_slice(&video.data[o..o + patch * 3]);
                    }
                }
            }
        }
    }
    Ok(VideoPatchGrid { patches: Tensor::from_vec(count, dim, data), grid_pos, tubelet, patch, grid })
}

pub fn tubelet_unpatchify(grid: &VideoPatchGrid) -> Result<VideoTensor> {
    let (gt, gh, gw) = grid.grid;
    let (tb, p) = (grid.tubelet, grid.patch);
    if grid.patches.rows() != gt * gh * gw || grid.patches.cols() != tb * p * p * 3 {
        return Err(Error::Shape(format!(
            "patch tensor {:?} does not match a {gt}x{gh}x{gw} grid of {tb}x{p}x{p} tubelets",
            grid.patches.shape()
        )));
    }
    let mut out = VideoTensor::zeros(gt * tb, gh * p, gw * p);
    for (row, &(t, gy, gx)) in grid.grid_pos.iter().enumerate() {
        let src = grid.patches.row(row);
        let mut k = 0;
        for dt in 0..tb {
            for dy in 0..p {
                let o = out.offset(t * tb + dt, gy * p + dy, gx * p);
                out.data[o..o + p * 3].copy_from_slice(&src[k..k + p * 3]);
                k += p * 3;
            }
        }
    }
    Ok(out)
}

/// sample → resize/crop → patchify.
pub fn preprocess_video(frames: &VideoFrames, cfg: &VideoConfig) -> Result<VideoPatchGrid> {
    cfg.validate()?;
    let mut video = sample_frames(frames, cfg.frames)?;
    if video.height != cfg.height || video.width != cfg.width {
        video = resize_center_crop(&video, cfg.height, cfg.width);
    }
    let grid = tubelet_patchify(&video, cfg.tubelet, cfg.patch)?;
    debug_assert_eq!(grid.len(), cfg.num_tokens());
    Ok(grid)
}
