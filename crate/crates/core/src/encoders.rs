//! Token embedding, the per-modality encoders and the modality-unified encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imu::ImuPatchGrid;
use crate::nn::{mean_matrix, sincos_2d, sincos_3d, Embedding, LayerNorm, Linear, Modality, Transformer};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::video::VideoPatchGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth_video: usize,
    pub depth_imu: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub unified_depth: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self { embed_dim: 64, depth_video: 2, depth_imu: 2, heads: 4, mlp_ratio: 4.0, unified_depth: 1 }
    }

    /// ViT-Base widths.
    pub fn paper() -> Self {
        Self { embed_dim: 768, depth_video: 12, depth_imu: 12, heads: 12, mlp_ratio: 4.0, unified_depth: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads)));
        }
        if self.unified_depth == 0 {
            return Err(Error::Config("unified_depth must be at least 1".into()));
        }
        if self.embed_dim % 4 != 0 || self.embed_dim < 12 {
            return Err(Error::Config(format!("embed_dim {} must be a multiple of 4 and at least 12", self.embed_dim)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// A subset of one clip's IMU patches, with the metadata embeddings need.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuView {
    pub patches: Tensor,
    pub grid_pos: Vec<(usize, usize)>,
    pub device: Vec<usize>,
    /// Position of each patch in the full grid.
    pub index: Vec<usize>,
}

impl ImuView {
    pub fn select(grid: &ImuPatchGrid, index: &[usize]) -> Self {
        let dim = grid.patches.cols();
        let mut data = Vec::with_capacity(index.len() * dim);
        for &i in index {
            data.extend_from_slice(grid.patches.row(i));
        }
        Self {
            patches: Tensor::from_vec(index.len(), dim, data),
            grid_pos: index.iter().map(|&i| grid.grid_pos[i]).collect(),
            device: index.iter().map(|&i| grid.device_index[i]).collect(),
            index: index.to_vec(),
        }
    }

    pub fn all(grid: &ImuPatchGrid) -> Self {
        Self::select(grid, &(0..grid.len()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoView {
    pub patches: Tensor,
    pub grid_pos: Vec<(usize, usize, usize)>,
    pub index: Vec<usize>,
}

impl VideoView {
    pub fn select(grid: &VideoPatchGrid, index: &[usize]) -> Self {
        let dim = grid.patches.cols();
        let mut data = Vec::with_capacity(index.len() * dim);
        for &i in index {
            data.extend_from_slice(grid.patches.row(i));
        }
        Self {
            patches: Tensor::from_vec(index.len(), dim, data),
            grid_pos: index.iter().map(|&i| grid.grid_pos[i]).collect(),
            index: index.to_vec(),
        }
    }

    pub fn all(grid: &VideoPatchGrid) -> Self {
        Self::select(grid, &(0..grid.len()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Token rows for a batch of clips stacked on one tape value. Clip `b`
/// owns rows `segments[b]`.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub x: Var,
    pub modality: Vec<Modality>,
    /// Original index of each token within its clip's modality block.
    pub index: Vec<usize>,
    /// Device of each IMU token.
    pub device: Vec<Option<usize>>,
    pub segments: Vec<(usize, usize)>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.segments.len()
    }

    fn with(&self, x: Var) -> Self {
        Self { x, ..self.clone() }
    }

    /// Row ranges of the batch's clips.
    pub fn rows_of(&self, b: usize) -> std::ops::Range<usize> {
        let (s, n) = self.segments[b];
        s..s + n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// One vector per clip.
    All,
    /// One vector per (clip, device), clip-major.
    PerDevice(usize),
    /// One vector per (clip, modality), IMU first.
    PerModality,
}

fn segments_of(lengths: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|n| {
            let s = (start, n);
            start += n;
            s
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Encoders {
    pub imu_proj: Linear,
    pub video_proj: Linear,
    pub device: Embedding,
    pub type_imu: Embedding,
    pub type_video: Embedding,
    pub imu: Transformer,
    pub video: Transformer,
    pub unified: Transformer,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl Encoders {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &EncoderConfig,
        imu_patch_dim: usize,
        video_patch_dim: usize,
        devices: usize,
    ) -> Self {
        let d = cfg.embed_dim;
        Self {
            imu_proj: Linear::new(store, rng, "encoder.imu_embed", imu_patch_dim, d),
            video_proj: Linear::new(store, rng, "encoder.video_embed", video_patch_dim, d),
            device: Embedding::new(store, rng, "encoder.device_embed", devices.max(1), d),
            type_imu: Embedding::new(store, rng, "encoder.type_imu", 1, d),
            type_video: Embedding::new(store, rng, "encoder.type_video", 1, d),
            imu: Transformer::new(store, rng, "encoder.imu", cfg.depth_imu, d, cfg.heads, cfg.mlp_ratio),
            video: Transformer::new(store, rng, "encoder.video", cfg.depth_video, d, cfg.heads, cfg.mlp_ratio),
            unified: Transformer::new(store, rng, "encoder.unified", cfg.unified_depth, d, cfg.heads, cfg.mlp_ratio),
            norm: LayerNorm::new(store, "encoder.unified_norm", d),
            dim: d,
        }
    }

    /// Projection + 2-D (time, freq) position + device embedding + IMU type.
    pub fn embed_imu(&self, t: &mut Tape, views: &[ImuView]) -> Result<TokenBatch> {
        let in_dim = self.imu_proj.in_dim(t.store());
        if let Some(v) = views.iter().find(|v| v.patches.cols() != in_dim && !v.is_empty()) {
            return Err(Error::Shape(format!("IMU patch width {} but encoder expects {in_dim}", v.patches.cols())));
        }
        let n: usize = views.iter().map(ImuView::len).sum();
        let mut data = Vec::with_capacity(n * in_dim);
        let mut cells = Vec::with_capacity(n);
        let mut devices = Vec::with_capacity(n);
        let mut index = Vec::with_capacity(n);
        for v in views {
            data.extend_from_slice(v.patches.data());
            cells.extend_from_slice(&v.grid_pos);
            devices.extend_from_slice(&v.device);
            index.extend_from_slice(&v.index);
        }
        let x = t.constant(Tensor::from_vec(n, in_dim, data));
        let x = self.imu_proj.forward(t, x);
        let pos = t.constant(sincos_2d(&cells, self.dim));
        let x = t.add(x, pos);
        let dev = self.device.lookup(t, &devices);
        let x = t.add(x, dev);
        let ty = self.type_imu.row(t);
        let x = t.add_row(x, ty);
        Ok(TokenBatch {
            x,
            modality: vec![Modality::Imu; n],
            index,
            device: devices.into_iter().map(Some).collect(),
            segments: segments_of(views.iter().map(ImuView::len)),
        })
    }

    /// Projection + 3-D (t, h, w) position + video type.
    pub fn embed_video(&self, t: &mut Tape, views: &[VideoView]) -> Result<TokenBatch> {
        let in_dim = self.video_proj.in_dim(t.store());
        if let Some(v) = views.iter().find(|v| v.patches.cols() != in_dim && !v.is_empty()) {
            return Err(Error::Shape(format!("video patch width {} but encoder expects {in_dim}", v.patches.cols())));
        }
        let n: usize = views.iter().map(VideoView::len).sum();
        let mut data = Vec::with_capacity(n * in_dim);
        let mut cells = Vec::with_capacity(n);
        let mut index = Vec::with_capacity(n);
        for v in views {
            data.extend_from_slice(v.patches.data());
            cells.extend_from_slice(&v.grid_pos);
            index.extend_from_slice(&v.index);
        }
        let x = t.constant(Tensor::from_vec(n, in_dim, data));
        let x = self.video_proj.forward(t, x);
        let pos = t.constant(sincos_3d(&cells, self.dim));
        let x = t.add(x, pos);
        let ty = self.type_video.row(t);
        let x = t.add_row(x, ty);
        Ok(TokenBatch {
            x,
            modality: vec![Modality::Video; n],
            index,
            device: vec![None; n],
            segments: segments_of(views.iter().map(VideoView::len)),
        })
    }

    pub fn encode_imu(&self, t: &mut Tape, tokens: &TokenBatch) -> TokenBatch {
        let x = self.imu.forward(t, tokens.x, &tokens.segments);
        tokens.with(x)
    }

    pub fn encode_video(&self, t: &mut Tape, tokens: &TokenBatch) -> TokenBatch {
        let x = self.video.forward(t, tokens.x, &tokens.segments);
        tokens.with(x)
    }

    /// Per clip, IMU tokens then video tokens, through the unified layers.
    pub fn encode_unified(&self, t: &mut Tape, imu: Option<&TokenBatch>, video: Option<&TokenBatch>) -> Result<TokenBatch> {
        let joined = match (imu, video) {
            (Some(i), None) => i.clone(),
            (None, Some(v)) => v.clone(),
            (None, None) => return Err(Error::Shape("unified encoder needs at least one modality".into())),
            (Some(i), Some(v)) => {
                if i.batch_size() != v.batch_size() {
                    return Err(Error::Shape(format!(
                        "IMU batch {} and video batch {} differ",
                        i.batch_size(),
                        v.batch_size()
                    )));
                }
                if t.shape(i.x).1 != t.shape(v.x).1 {
                    return Err(Error::Shape("IMU and video token widths differ".into()));
                }
                let stacked = t.concat_rows(&[i.x, v.x]);
                let offset = i.len();
                let mut order = Vec::with_capacity(i.len() + v.len());
                let mut lengths = Vec::with_capacity(i.batch_size());
                for b in 0..i.batch_size() {
                    order.extend(i.rows_of(b));
                    order.extend(v.rows_of(b).map(|r| r + offset));
                    lengths.push(i.segments[b].1 + v.segments[b].1);
                }
                let pick = |r: usize| if r < offset { (i, r) } else { (v, r - offset) };
                TokenBatch {
                    x: t.gather_rows(stacked, &order),
                    modality: order.iter().map(|&r| { let (s, k) = pick(r); s.modality[k] }).collect(),
                    index: order.iter().map(|&r| { let (s, k) = pick(r); s.index[k] }).collect(),
                    device: order.iter().map(|&r| { let (s, k) = pick(r); s.device[k] }).collect(),
                    segments: segments_of(lengths),
                }
            }
        };
        let x = self.unified.forward(t, joined.x, &joined.segments);
        let x = self.norm.forward(t, x);
        Ok(joined.with(x))
    }

    /// Mean of token groups. Errors when any group is empty.
    pub fn pool(&self, t: &mut Tape, tokens: &TokenBatch, group: Pool) -> Result<Var> {
        let groups = pool_groups(tokens, group);
        if let Some(g) = groups.iter().position(Vec::is_empty) {
            log::debug!("{group:?} group {g} has no tokens");
            return Err(Error::EmptyGroup);
        }
        let m = t.constant(mean_matrix(&groups, tokens.len()));
        Ok(t.matmul(m, tokens.x))
    }
}

/// Row sets for each pooling group.
pub fn pool_groups(tokens: &TokenBatch, group: Pool) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    for b in 0..tokens.batch_size() {
        match group {
            Pool::All => groups.push(tokens.rows_of(b).collect()),
            Pool::PerDevice(n) => {
                for d in 0..n {
                    groups.push(tokens.rows_of(b).filter(|&r| tokens.device[r] == Some(d)).collect());
                }
            }
            Pool::PerModality => {
                for m in [Modality::Imu, Modality::Video] {
                    groups.push(tokens.rows_of(b).filter(|&r| tokens.modality[r] == m).collect());
                }
            }
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::Spectrogram;
    use crate::rng::rng_for;

    fn cfg() -> EncoderConfig {
        EncoderConfig { embed_dim: 12, depth_video: 1, depth_imu: 1, heads: 2, mlp_ratio: 2.0, unified_depth: 1 }
    }

    fn build() -> (ParamStore, Encoders) {
        let mut store = ParamStore::new();
        let enc = Encoders::new(&mut store, &mut rng_for(4, &[]), &cfg(), 12, 24, 2);
        (store, enc)
    }

    fn grid() -> ImuPatchGrid {
        let specs: Vec<Spectrogram> = (0..2)
            .map(|d| Spectrogram {
                device_id: format!("d{d}"),
                frames: 4,
                bins: 4,
                data: (0..48).map(|i| ((i * 7 + d * 3) % 11) as f64 / 5.0 - 1.0).collect(),
            })
            .collect();
        crate::imu::patchify_imu(&specs, 2).unwrap()
    }

    #[test]
    fn zero_patch_embeds_to_bias_plus_embeddings() {
        let (store, enc) = build();
        let mut t = Tape::new(&store);
        let view = ImuView {
            patches: Tensor::zeros(1, 12),
            grid_pos: vec![(1, 2)],
            device: vec![1],
            index: vec![0],
        };
        let tb = enc.embed_imu(&mut t, &[view]).unwrap();
        let mut want = store.get(enc.imu_proj.bias).clone();
        want.add_assign(&sincos_2d(&[(1, 2)], 12));
        want.add_assign(&Tensor::row_vector(store.get(enc.device.table).row(1).to_vec()));
        want.add_assign(store.get(enc.type_imu.table));
        assert!(t.value(tb.x).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn device_embedding_is_the_only_difference() {
        let (store, enc) = build();
        let mut t = Tape::new(&store);
        let p = Tensor::from_fn(2, 12, |_, c| c as f64 * 0.1);
        let view = ImuView { patches: p, grid_pos: vec![(0, 1), (0, 1)], device: vec![0, 1], index: vec![0, 5] };
        let tb = enc.embed_imu(&mut t, &[view]).unwrap();
        let x = t.value(tb.x);
        let table = store.get(enc.device.table);
        for c in 0..12 {
            let diff = x.get(1, c) - x.get(0, c);
            assert!((diff - (table.get(1, c) - table.get(0, c))).abs() < 1e-15);
        }
        assert_eq!(tb.index, vec![0, 5]);
    }

    #[test]
    fn type_embedding_shifts_by_its_difference() {
        let (store, enc) = build();
        let mut t = Tape::new(&store);
        let tb = enc.embed_imu(&mut t, &[ImuView::all(&grid())]).unwrap();
        let swap = store.get(enc.type_video.table).zip_map(store.get(enc.type_imu.table), |a, b| a - b);
        let x = t.value(tb.x).clone();
        let shifted = Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + swap.get(0, c));
        let mut manual = Tape::new(&store);
        let raw = manual.constant(ImuView::all(&grid()).patches);
        let proj = enc.imu_proj.forward(&mut manual, raw);
        let g = grid();
        let pos = manual.constant(sincos_2d(&g.grid_pos, 12));
        let e = manual.add(proj, pos);
        let dev = enc.device.lookup(&mut manual, &g.device_index);
        let e = manual.add(e, dev);
        let ty = enc.type_video.row(&mut manual);
        let as_video = manual.add_row(e, ty);
        assert!(manual.value(as_video).max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn unified_orders_imu_then_video_per_clip() {
        let (store, enc) = build();
        let mut t = Tape::new(&store);
        let g = grid();
        let imu = enc.embed_imu(&mut t, &[ImuView::select(&g, &[0, 3]), ImuView::select(&g, &[1])]).unwrap();
        let vp = |n: usize| VideoView {
            patches: Tensor::from_fn(n, 24, |r, c| (r + c) as f64 * 0.01),
            grid_pos: (0..n).map(|i| (0, 0, i)).collect(),
            index: (0..n).collect(),
        };
        let video = enc.embed_video(&mut t, &[vp(1), vp(2)]).unwrap();
        let u = enc.encode_unified(&mut t, Some(&imu), Some(&video)).unwrap();
        assert_eq!(u.len(), imu.len() + video.len());
        assert_eq!(u.segments, vec![(0, 3), (3, 3)]);
        use Modality::*;
        assert_eq!(u.modality, vec![Imu, Imu, Video, Imu, Video, Video]);
        assert_eq!(u.index, vec![0, 3, 0, 1, 0, 1]);
        let only = enc.encode_unified(&mut t, Some(&imu), None).unwrap();
        assert_eq!(only.len(), imu.len());
        assert!(enc.encode_unified(&mut t, None, None).is_err());
    }

    #[test]
    fn pooling_groups() {
        let (store, enc) = build();
        let mut t = Tape::new(&store);
        let g = grid();
        let tb = enc.embed_imu(&mut t, &[ImuView::all(&g)]).unwrap();
        let all = enc.pool(&mut t, &tb, Pool::All).unwrap();
        let per = enc.pool(&mut t, &tb, Pool::PerDevice(2)).unwrap();
        let mean_of = t.mean_rows(per);
        assert!(t.value(all).max_abs_diff(t.value(mean_of)) < 1e-12);
        let part = enc.embed_imu(&mut t, &[ImuView::select(&g, &[0, 1])]).unwrap();
        assert!(matches!(enc.pool(&mut t, &part, Pool::PerDevice(2)), Err(Error::EmptyGroup)));
        let same = TokenBatch {
            x: t.constant(Tensor::from_fn(3, 4, |_, c| c as f64)),
            modality: vec![Modality::Imu; 3],
            index: vec![0, 1, 2],
            device: vec![Some(0); 3],
            segments: vec![(0, 3)],
        };
        let p = enc.pool(&mut t, &same, Pool::All).unwrap();
        assert_eq!(t.value(p).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_wrong_patch_width() {
        let (store, enc) = build();
        let mut t = Tape::new(&store);
        let bad = ImuView { patches: Tensor::zeros(1, 5), grid_pos: vec![(0, 0)], device: vec![0], index: vec![0] };
        assert!(matches!(enc.embed_imu(&mut t, &[bad]), Err(Error::Shape(_))));
    }
}
