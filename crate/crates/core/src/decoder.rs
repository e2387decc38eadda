//! Pixel decoder: re-inserts encoded tokens among mask tokens and predicts
//! every patch of both modalities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::TokenBatch;
use crate::error::{Error, Result};
use crate::imu::ImuPatchGrid;
use crate::nn::{sincos_2d, sincos_3d, Embedding, LayerNorm, Linear, Modality, Transformer};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::video::VideoPatchGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self { dim: 32, depth: 2, heads: 4, mlp_ratio: 4.0 }
    }

    pub fn paper() -> Self {
        Self { dim: 384, depth: 4, heads: 6, mlp_ratio: 4.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim % 4 != 0 || self.dim < 12 {
            return Err(Error::Config(format!("decoder dim {} must be a multiple of 4 and at least 12", self.dim)));
        }
        Ok(())
    }
}

/// Full slot layout of one clip: every IMU patch cell, then every tubelet.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotLayout {
    pub imu_cells: Vec<(usize, usize)>,
    pub imu_devices: Vec<usize>,
    pub video_cells: Vec<(usize, usize, usize)>,
}

impl SlotLayout {
    pub fn from_grids(imu: Option<&ImuPatchGrid>, video: Option<&VideoPatchGrid>) -> Self {
        Self {
            imu_cells: imu.map(|g| g.grid_pos.clone()).unwrap_or_default(),
            imu_devices: imu.map(|g| g.device_index.clone()).unwrap_or_default(),
            video_cells: video.map(|g| g.grid_pos.clone()).unwrap_or_default(),
        }
    }

    pub fn imu_slots(&self) -> usize {
        self.imu_cells.len()
    }

    pub fn video_slots(&self) -> usize {
        self.video_cells.len()
    }

    pub fn len(&self) -> usize {
        self.imu_slots() + self.video_slots()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct DecoderInput {
    pub x: Var,
    pub segments: Vec<(usize, usize)>,
    /// Rows of `x` holding IMU slots, clip-major in slot order.
    pub imu_rows: Vec<usize>,
    pub video_rows: Vec<usize>,
    pub mask_tokens: usize,
}

/// Predicted patches, clip-major, in the original grid order.
#[derive(Clone, Debug)]
pub struct ReconstructionPair {
    pub imu: Option<Var>,
    pub video: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub proj: Linear,
    pub mask_token: Embedding,
    pub type_imu: Embedding,
    pub type_video: Embedding,
    pub device: Embedding,
    pub blocks: Transformer,
    pub norm: LayerNorm,
    pub imu_head: Linear,
    pub video_head: Linear,
    pub dim: usize,
}

impl PixelDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &DecoderConfig,
        embed_dim: usize,
        imu_patch_dim: usize,
        video_patch_dim: usize,
        devices: usize,
    ) -> Self {
        let d = cfg.dim;
        Self {
            proj: Linear::new(store, rng, "decoder.embed", embed_dim, d),
            mask_token: Embedding::new(store, rng, "decoder.mask_token", 1, d),
            type_imu: Embedding::new(store, rng, "decoder.type_imu", 1, d),
            type_video: Embedding::new(store, rng, "decoder.type_video", 1, d),
            device: Embedding::new(store, rng, "decoder.device_embed", devices.max(1), d),
            blocks: Transformer::new(store, rng, "decoder.blocks", cfg.depth, d, cfg.heads, cfg.mlp_ratio),
            norm: LayerNorm::new(store, "decoder.norm", d),
            imu_head: Linear::new(store, rng, "decoder.imu_head", d, imu_patch_dim),
            video_head: Linear::new(store, rng, "decoder.video_head", d, video_patch_dim),
            dim: d,
        }
    }

    /// Place every encoded token at its original slot, fill the rest with
    /// the mask token and add decoder position, type and device embeddings.
    pub fn assemble(&self, t: &mut Tape, encoded: &TokenBatch, layout: &SlotLayout) -> Result<DecoderInput> {
        let (pi, pv) = (layout.imu_slots(), layout.video_slots());
        let n = encoded.len();
        let batch = encoded.batch_size();
        let mut gather = Vec::with_capacity(batch * layout.len());
        let mut mask_tokens = 0;
        for b in 0..batch {
            let mut imu = vec![None; pi];
            let mut video = vec![None; pv];
            for r in encoded.rows_of(b) {
                let k = encoded.index[r];
                let slots = match encoded.modality[r] {
                    Modality::Imu => &mut imu,
                    Modality::Video => &mut video,
                };
                let Some(slot) = slots.get_mut(k) else {
                    return Err(Error::Index(format!(
                        "{:?} token index {k} out of range for {} slots",
                        encoded.modality[r],
                        slots.len()
                    )));
                };
                if slot.replace(r).is_some() {
                    return Err(Error::Index(format!("duplicate {:?} token index {k}", encoded.modality[r])));
                }
            }
            for s in imu.into_iter().chain(video) {
                gather.push(s.unwrap_or_else(|| {
                    mask_tokens += 1;
                    n
                }));
            }
        }
        let proj = self.proj.forward(t, encoded.x);
        let token = self.mask_token.row(t);
        let stacked = t.concat_rows(&[proj, token]);
        let x = t.gather_rows(stacked, &gather);

        let clip_pos = {
            let a = sincos_2d(&layout.imu_cells, self.dim);
            let v = sincos_3d(&layout.video_cells, self.dim);
            let mut data = a.into_vec();
            data.extend(v.into_vec());
            data
        };
        let mut pos = Vec::with_capacity(batch * clip_pos.len());
        for _ in 0..batch {
            pos.extend_from_slice(&clip_pos);
        }
        let pos = t.constant(Tensor::from_vec(batch * layout.len(), self.dim, pos));
        let x = t.add(x, pos);

        let l = layout.len();
        let imu_rows: Vec<usize> = (0..batch).flat_map(|b| (0..pi).map(move |s| b * l + s)).collect();
        let video_rows: Vec<usize> = (0..batch).flat_map(|b| (0..pv).map(move |s| b * l + pi + s)).collect();

        // per-slot extras: IMU rows get type + device, video rows get type
        let mut parts = Vec::new();
        let mut order = vec![0; batch * l];
        if pi > 0 {
            let devices: Vec<usize> = (0..batch).flat_map(|_| layout.imu_devices.iter().copied()).collect();
            let dev = self.device.lookup(t, &devices);
            let ty = self.type_imu.row(t);
            parts.push(t.add_row(dev, ty));
        }
        if pv > 0 {
            let zeros = t.constant(Tensor::zeros(batch * pv, self.dim));
            let ty = self.type_video.row(t);
            parts.push(t.add_row(zeros, ty));
        }
        for (k, &r) in imu_rows.iter().chain(&video_rows).enumerate() {
            order[r] = k;
        }
        let extras = t.concat_rows(&parts);
        let extras = t.gather_rows(extras, &order);
        let x = t.add(x, extras);

        Ok(DecoderInput { x, segments: (0..batch).map(|b| (b * l, l)).collect(), imu_rows, video_rows, mask_tokens })
    }

    pub fn decode(&self, t: &mut Tape, input: &DecoderInput) -> ReconstructionPair {
        let h = self.blocks.forward(t, input.x, &input.segments);
        let h = self.norm.forward(t, h);
        let head = |t: &mut Tape, rows: &[usize], lin: &Linear| {
            if rows.is_empty() {
                None
            } else {
                let sel = t.gather_rows(h, rows);
                Some(lin.forward(t, sel))
            }
        };
        ReconstructionPair {
            imu: head(t, &input.imu_rows, &self.imu_head),
            video: head(t, &input.video_rows, &self.video_head),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use proptest::sample::subsequence;

    fn layout() -> SlotLayout {
        SlotLayout {
            imu_cells: vec![(0, 0), (0, 1), (0, 0), (0, 1)],
            imu_devices: vec![0, 0, 1, 1],
            video_cells: vec![(0, 0, 0), (0, 0, 1), (1, 0, 0)],
        }
    }

    fn decoder() -> (ParamStore, PixelDecoder) {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { dim: 12, depth: 1, heads: 2, mlp_ratio: 2.0 };
        let d = PixelDecoder::new(&mut store, &mut rng_for(6, &[]), &cfg, 8, 5, 7, 2);
        (store, d)
    }

    fn encoded(t: &mut Tape, imu: &[usize], video: &[usize], batch: usize) -> TokenBatch {
        let per = imu.len() + video.len();
        let mut modality = Vec::new();
        let mut index = Vec::new();
        for _ in 0..batch {
            modality.extend(imu.iter().map(|_| Modality::Imu).chain(video.iter().map(|_| Modality::Video)));
            index.extend(imu.iter().chain(video).copied());
        }
        TokenBatch {
            x: t.constant(Tensor::from_fn(per * batch, 8, |r, c| (r * 8 + c) as f64 * 0.01)),
            device: modality.iter().map(|_| None).collect(),
            modality,
            index,
            segments: (0..batch).map(|b| (b * per, per)).collect(),
        }
    }

    #[test]
    fn tokens_land_in_their_slots() {
        let (store, d) = decoder();
        let mut t = Tape::new(&store);
        let e = encoded(&mut t, &[3, 1], &[2], 2);
        let inp = d.assemble(&mut t, &e, &layout()).unwrap();
        assert_eq!(t.shape(inp.x), (14, 12));
        assert_eq!(inp.mask_tokens, 2 * (7 - 3));
        let proj = d.proj.forward(&mut t, e.x);
        // slot 3 of clip 1's IMU block (row 7 + 3) comes from encoded row 3 + 0
        let x = t.value(inp.x);
        let pos = sincos_2d(&[(0, 1)], 12);
        let dev = store.get(d.device.table).row(1).to_vec();
        let ty = store.get(d.type_imu.table).row(0).to_vec();
        for c in 0..12 {
            let want = t.value(proj).get(3, c) + pos.get(0, c) + dev[c] + ty[c];
            assert!((x.get(10, c) - want).abs() < 1e-12);
        }
        // video slot 0 of clip 0 is a mask token
        let mt = store.get(d.mask_token.table).row(0).to_vec();
        let vpos = sincos_3d(&[(0, 0, 0)], 12);
        let vty = store.get(d.type_video.table).row(0).to_vec();
        for c in 0..12 {
            assert!((x.get(4, c) - (mt[c] + vpos.get(0, c) + vty[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn no_masking_means_no_mask_tokens() {
        let (store, d) = decoder();
        let mut t = Tape::new(&store);
        let e = encoded(&mut t, &[0, 1, 2, 3], &[0, 1, 2], 1);
        let inp = d.assemble(&mut t, &e, &layout()).unwrap();
        assert_eq!(inp.mask_tokens, 0);
        let rec = d.decode(&mut t, &inp);
        assert_eq!(t.shape(rec.imu.unwrap()), (4, 5));
        assert_eq!(t.shape(rec.video.unwrap()), (3, 7));
    }

    #[test]
    fn rejects_bad_indices() {
        let (store, d) = decoder();
        let mut t = Tape::new(&store);
        let dup = encoded(&mut t, &[1, 1], &[], 1);
        assert!(matches!(d.assemble(&mut t, &dup, &layout()), Err(Error::Index(_))));
        let out = encoded(&mut t, &[4], &[], 1);
        assert!(matches!(d.assemble(&mut t, &out, &layout()), Err(Error::Index(_))));
    }

    #[test]
    fn imu_only_layout() {
        let (store, d) = decoder();
        let mut t = Tape::new(&store);
        let e = encoded(&mut t, &[2], &[], 3);
        let l = SlotLayout { video_cells: vec![], ..layout() };
        let inp = d.assemble(&mut t, &e, &l).unwrap();
        let rec = d.decode(&mut t, &inp);
        assert!(rec.video.is_none());
        assert_eq!(t.shape(rec.imu.unwrap()), (12, 5));
    }

    proptest! {
        #[test]
        fn assemble_places_every_token_once(
            imu in subsequence(vec![0usize, 1, 2, 3], 0..=4).prop_shuffle(),
            video in subsequence(vec![0usize, 1, 2], 0..=3).prop_shuffle(),
            batch in 1usize..3,
        ) {
            prop_assume!(!imu.is_empty() || !video.is_empty());
            let (store, d) = decoder();
            let l = layout();
            let mut t = Tape::new(&store);
            let e = encoded(&mut t, &imu, &video, batch);
            let inp = d.assemble(&mut t, &e, &l).unwrap();
            prop_assert_eq!(inp.mask_tokens, batch * (7 - imu.len() - video.len()));
            let proj = d.proj.forward(&mut t, e.x);
            let x = t.value(inp.x).clone();
            let proj = t.value(proj).clone();
            let mask = store.get(d.mask_token.table).row(0).to_vec();
            let per = imu.len() + video.len();
            for b in 0..batch {
                for slot in 0..7 {
                    let (row, extra, source) = if slot < 4 {
                        let pos = sincos_2d(&[l.imu_cells[slot]], 12);
                        let dev = store.get(d.device.table).row(l.imu_devices[slot]).to_vec();
                        let ty = store.get(d.type_imu.table).row(0).to_vec();
                        let extra: Vec<f64> = (0..12).map(|c| pos.get(0, c) + dev[c] + ty[c]).collect();
                        (inp.imu_rows[b * 4 + slot], extra, imu.iter().position(|&i| i == slot))
                    } else {
                        let v = slot - 4;
                        let pos = sincos_3d(&[l.video_cells[v]], 12);
                        let ty = store.get(d.type_video.table).row(0).to_vec();
                        let extra: Vec<f64> = (0..12).map(|c| pos.get(0, c) + ty[c]).collect();
                        (inp.video_rows[b * 3 + v], extra, video.iter().position(|&i| i == v).map(|k| imu.len() + k))
                    };
                    for c in 0..12 {
                        let content = source.map_or(mask[c], |k| proj.get(b * per + k, c));
                        prop_assert!((x.get(row, c) - content - extra[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
