//! The full network: encoders, graph branch, pixel decoder and classifier
//! head, plus the pretraining and classification forward passes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::{DecoderConfig, PixelDecoder, SlotLayout};
use crate::encoders::{EncoderConfig, Encoders, ImuView, Pool, TokenBatch, VideoView};
use crate::error::{Error, Result};
use crate::graph::{block_diagonal, full_adjacency, GinConfig, GraphBranch};
use crate::imu::{ImuPatchGrid, StftParams};
use crate::masking::{imu_mask, node_mask, tube_mask, ImuMaskStyle, MaskPlan};
use crate::nn::{mean_matrix, Linear};
use crate::objectives::{contrastive_loss, graph_cosine_loss, pixel_mse, LossReport, LossWeights};
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;
use crate::video::{VideoConfig, VideoPatchGrid};

/// Which inputs a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalitySet {
    Imu,
    Video,
    Both,
}

impl ModalitySet {
    pub fn uses_imu(self) -> bool {
        matches!(self, Self::Imu | Self::Both)
    }

    pub fn uses_video(self) -> bool {
        matches!(self, Self::Video | Self::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Imu => "imu",
            Self::Video => "video",
            Self::Both => "both",
        }
    }
}

impl std::str::FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imu" => Ok(Self::Imu),
            "video" => Ok(Self::Video),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown modality {s:?} (expected imu, video or both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Canonical device order; node `n` of the graph is `devices[n]`.
    pub devices: Vec<String>,
    pub stft: StftParams,
    pub imu_patch: usize,
    pub video: VideoConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub gin: GinConfig,
}

impl ModelConfig {
    pub fn desk(devices: Vec<String>) -> Self {
        Self {
            devices,
            stft: StftParams::desk(),
            imu_patch: 16,
            video: VideoConfig::desk(),
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
            gin: GinConfig::desk(),
        }
    }

    pub fn paper(devices: Vec<String>) -> Self {
        Self {
            devices,
            stft: StftParams::paper(),
            imu_patch: 16,
            video: VideoConfig::paper(),
            encoder: EncoderConfig::paper(),
            decoder: DecoderConfig::paper(),
            gin: GinConfig::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::Config("at least one IMU device is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.devices.iter().find(|d| !seen.insert(d.as_str())) {
            return Err(Error::Config(format!("device {dup:?} listed twice")));
        }
        self.stft.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.imu_patch == 0 || self.stft.frames % self.imu_patch != 0 || self.stft.bins % self.imu_patch != 0 {
            return Err(Error::Config(format!(
                "{}x{} spectrogram does not tile into {}x{} patches",
                self.stft.frames, self.stft.bins, self.imu_patch, self.imu_patch
            )));
        }
        self.video.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.gin.validate()
    }

    pub fn imu_patch_dim(&self) -> usize {
        self.imu_patch * self.imu_patch * 3
    }

    pub fn imu_cells(&self) -> (usize, usize) {
        (self.stft.frames / self.imu_patch, self.stft.bins / self.imu_patch)
    }

    pub fn imu_tokens(&self) -> usize {
        let (t, f) = self.imu_cells();
        self.devices.len() * t * f
    }

    pub fn device_index(&self, id: &str) -> Result<usize> {
        self.devices.iter().position(|d| d == id).ok_or_else(|| Error::UnknownDevice(id.to_string()))
    }
}

/// Mask ratios and style for one pretraining step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub imu_ratio: f64,
    pub video_ratio: f64,
    pub graph_ratio: f64,
    pub imu_style: ImuMaskStyle,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { imu_ratio: 0.75, video_ratio: 0.9, graph_ratio: 0.5, imu_style: ImuMaskStyle::Random }
    }
}

/// Features that barely vary over the labeled set are scaled by at most this inverse.
const FEATURE_STD_FLOOR: f64 = 1e-3;

/// One preprocessed clip.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clip_id: String,
    pub imu: Option<ImuPatchGrid>,
    pub video: Option<VideoPatchGrid>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    /// Per-feature standardization fitted on the labeled set; never trained.
    pub feature_mean: ParamId,
    pub feature_std: ParamId,
    pub linear: Linear,
    pub with_graph: bool,
    pub classes: usize,
}

/// What the pretraining pass needs beyond the batch.
#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub modality: ModalitySet,
    pub use_graph: bool,
    pub masks: MaskConfig,
    pub weights: LossWeights,
    /// Reconstruction loss over masked patches only (otherwise every patch).
    pub masked_only: bool,
}

/// Per-step masks for a batch, drawn from one seed.
#[derive(Clone, Debug)]
pub struct BatchMasks {
    pub imu: Vec<MaskPlan>,
    pub video: Vec<MaskPlan>,
    pub nodes: Vec<MaskPlan>,
}

pub struct PretrainOutput {
    pub total: Var,
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct EviMae {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoders: Encoders,
    pub graph: GraphBranch,
    pub decoder: PixelDecoder,
    pub head: Option<ClassifierHead>,
}

fn stack_rows(rows: impl Iterator<Item = Tensor>, cols: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for t in rows {
        n += t.rows();
        data.extend(t.into_vec());
    }
    Tensor::from_vec(n, cols, data)
}

impl EviMae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, &[stream::INIT]);
        let n_dev = config.devices.len();
        let (ipd, vpd) = (config.imu_patch_dim(), config.video.token_dim());
        let encoders = Encoders::new(&mut params, &mut rng, &config.encoder, ipd, vpd, n_dev);
        let graph = GraphBranch::new(&mut params, &mut rng, &config.gin, config.encoder.embed_dim);
        let decoder = PixelDecoder::new(&mut params, &mut rng, &config.decoder, config.encoder.embed_dim, ipd, vpd, n_dev);
        Ok(Self { config, params, encoders, graph, decoder, head: None })
    }

    /// Attach a fresh `classes`-way head: identity standardization, then linear.
    pub fn add_head(&mut self, classes: usize, with_graph: bool, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        if self.head.is_some() {
            return Err(Error::Config("model already has a classifier head".into()));
        }
        let d = self.config.encoder.embed_dim;
        let width = if with_graph { 2 * d } else { d };
        let mut rng = rng_for(seed, &[stream::INIT, 1]);
        let feature_mean = self.params.add("head.feature_mean", Tensor::zeros(1, width));
        let feature_std = self.params.add("head.feature_std", Tensor::full(1, width, 1.0));
        let linear = Linear::new(&mut self.params, &mut rng, "head", width, classes);
        self.head = Some(ClassifierHead { feature_mean, feature_std, linear, with_graph, classes });
        Ok(())
    }

    fn slot_layout(&self, batch: &[&Sample], modality: ModalitySet) -> SlotLayout {
        let first = batch[0];
        SlotLayout::from_grids(
            first.imu.as_ref().filter(|_| modality.uses_imu()),
            first.video.as_ref().filter(|_| modality.uses_video()),
        )
    }

    fn check_inputs(&self, batch: &[&Sample], modality: ModalitySet) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        for s in batch {
            if modality.uses_imu() {
                let g = s.imu.as_ref().ok_or_else(|| Error::Shape(format!("clip {} has no IMU patches", s.clip_id)))?;
                if g.len() != self.config.imu_tokens() {
                    return Err(Error::Shape(format!(
                        "clip {}: {} IMU patches, model expects {}",
                        s.clip_id,
                        g.len(),
                        self.config.imu_tokens()
                    )));
                }
            }
            if modality.uses_video() {
                let g = s.video.as_ref().ok_or_else(|| Error::Shape(format!("clip {} has no video patches", s.clip_id)))?;
                if g.len() != self.config.video.num_tokens() {
                    return Err(Error::Shape(format!(
                        "clip {}: {} video tokens, model expects {}",
                        s.clip_id,
                        g.len(),
                        self.config.video.num_tokens()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Masks for every clip of a batch; clip `b` uses seed path `(seed, stream, b)`.
    pub fn draw_masks(&self, batch_size: usize, masks: &MaskConfig, seed: u64) -> Result<BatchMasks> {
        let (tc, fc) = self.config.imu_cells();
        let n_dev = self.config.devices.len();
        let (gt, _, _) = self.config.video.grid();
        let spatial = self.config.video.spatial_cells();
        let mut out = BatchMasks { imu: Vec::new(), video: Vec::new(), nodes: Vec::new() };
        for b in 0..batch_size as u64 {
            out.imu.push(imu_mask(n_dev, tc, fc, masks.imu_style, masks.imu_ratio, derive_seed(seed, &[stream::IMU_MASK, b]))?);
            out.video.push(tube_mask(spatial, gt, masks.video_ratio, derive_seed(seed, &[stream::VIDEO_MASK, b]))?);
            out.nodes.push(node_mask(n_dev, masks.graph_ratio, derive_seed(seed, &[stream::GRAPH_MASK, b]))?);
        }
        Ok(out)
    }

    /// Per-device mean of IMU encoder outputs, one row per (clip, device);
    /// devices without tokens get a zero row.
    fn device_features(&self, t: &mut Tape, encoded: &TokenBatch) -> Var {
        let n_dev = self.config.devices.len();
        let mut groups = Vec::with_capacity(encoded.batch_size() * n_dev);
        for b in 0..encoded.batch_size() {
            for d in 0..n_dev {
                groups.push(encoded.rows_of(b).filter(|&r| encoded.device[r] == Some(d)).collect::<Vec<_>>());
            }
        }
        let m = t.constant(mean_matrix(&groups, encoded.len()));
        t.matmul(m, encoded.x)
    }

    fn adjacency(&self, t: &mut Tape, batch: usize) -> Var {
        let adj = block_diagonal(&full_adjacency(self.config.devices.len()), batch);
        t.constant(adj)
    }

    pub fn pretrain_forward(
        &self,
        t: &mut Tape,
        batch: &[&Sample],
        opts: &PretrainOptions,
        masks: &BatchMasks,
    ) -> Result<PretrainOutput> {
        let modality = opts.modality;
        self.check_inputs(batch, modality)?;
        let bsz = batch.len();
        let mut imu_vis = None;
        let mut video_vis = None;
        if modality.uses_imu() {
            let views: Vec<ImuView> = batch
                .iter()
                .zip(&masks.imu)
                .map(|(s, m)| ImuView::select(s.imu.as_ref().unwrap(), &m.visible_indices()))
                .collect();
            let tb = self.encoders.embed_imu(t, &views)?;
            imu_vis = Some(self.encoders.encode_imu(t, &tb));
        }
        if modality.uses_video() {
            let views: Vec<VideoView> = batch
                .iter()
                .zip(&masks.video)
                .map(|(s, m)| VideoView::select(s.video.as_ref().unwrap(), &m.visible_indices()))
                .collect();
            let tb = self.encoders.embed_video(t, &views)?;
            video_vis = Some(self.encoders.encode_video(t, &tb));
        }
        let unified = self.encoders.encode_unified(t, imu_vis.as_ref(), video_vis.as_ref())?;
        let layout = self.slot_layout(batch, modality);
        let input = self.decoder.assemble(t, &unified, &layout)?;
        let recon = self.decoder.decode(t, &input);

        let zero = t.constant(Tensor::scalar(0.0));
        let mut mse_imu = zero;
        let mut mse_video = zero;
        if let Some(pred) = recon.imu {
            let target = stack_rows(batch.iter().map(|s| s.imu.as_ref().unwrap().patches.clone()), self.config.imu_patch_dim());
            let p = layout.imu_slots();
            let rows: Vec<usize> =
                masks.imu.iter().enumerate().flat_map(|(b, m)| m.masked_indices.iter().map(move |&i| b * p + i)).collect();
            mse_imu = pixel_mse(t, pred, &target, opts.masked_only.then_some(rows.as_slice()))?;
        }
        if let Some(pred) = recon.video {
            let target = stack_rows(batch.iter().map(|s| s.video.as_ref().unwrap().patches.clone()), self.config.video.token_dim());
            let p = layout.video_slots();
            let rows: Vec<usize> =
                masks.video.iter().enumerate().flat_map(|(b, m)| m.masked_indices.iter().map(move |&i| b * p + i)).collect();
            mse_video = pixel_mse(t, pred, &target, opts.masked_only.then_some(rows.as_slice()))?;
        }

        let mut l_cos = zero;
        if modality.uses_imu() && opts.use_graph {
            let views: Vec<ImuView> = batch.iter().map(|s| ImuView::all(s.imu.as_ref().unwrap())).collect();
            let tb = self.encoders.embed_imu(t, &views)?;
            let full = self.encoders.encode_imu(t, &tb);
            let f_d = self.device_features(t, &full);
            let plan = MaskPlan::concat(&masks.nodes);
            if plan.num_masked() > 0 {
                let adj = self.adjacency(t, bsz);
                let (_, recon_nodes) = self.graph.autoencode(t, adj, f_d, &plan)?;
                let target = t.detach(f_d);
                l_cos = graph_cosine_loss(t, recon_nodes, target, &plan.masked_indices)?;
            }
        }

        let mut l_con = zero;
        let all_visible = |tb: &TokenBatch| (0..tb.batch_size()).all(|b| !tb.rows_of(b).is_empty());
        if let (Some(iv), Some(vv)) = (&imu_vis, &video_vis) {
            // a clip with nothing visible in one modality has no anchor to contrast
            if all_visible(iv) && all_visible(vv) {
                let fi = self.encoders.pool(t, iv, Pool::All)?;
                let fv = self.encoders.pool(t, vv, Pool::All)?;
                l_con = contrastive_loss(t, fv, fi, opts.weights.tau)?;
            } else {
                log::warn!("skipping contrastive term: a clip has no visible tokens");
            }
        }

        let w = &opts.weights;
        let mse = t.add(mse_video, mse_imu);
        let a = t.scale(mse, w.alpha);
        let b = t.scale(l_cos, w.beta);
        let c = t.scale(l_con, w.gamma);
        let total = t.add_all(&[a, b, c]);
        let report = LossReport {
            l_mse_video: t.value(mse_video).item(),
            l_mse_imu: t.value(mse_imu).item(),
            l_cos: t.value(l_cos).item(),
            l_con: t.value(l_con).item(),
            total: t.value(total).item(),
        };
        Ok(PretrainOutput { total, report })
    }

    /// Logits `batch × classes` from every available patch. Devices listed
    /// in `missing` contribute no tokens and their graph node becomes the
    /// encoder mask token.
    pub fn classify_forward(
        &self,
        t: &mut Tape,
        batch: &[&Sample],
        modality: ModalitySet,
        missing: &[usize],
    ) -> Result<Var> {
        let head = self.head.as_ref().ok_or_else(|| Error::Config("model has no classifier head".into()))?;
        let features = self.head_features(t, batch, modality, missing, head.with_graph)?;
        let mean = t.constant(self.params.get(head.feature_mean).map(|m| -m));
        let inv_std = t.constant(self.params.get(head.feature_std).map(|s| 1.0 / s));
        let centered = t.add_row(features, mean);
        let standardized = t.mul_row(centered, inv_std);
        Ok(head.linear.forward(t, standardized))
    }

    /// Fit the head's feature standardization to `samples` under the current encoders.
    pub fn fit_head_standardization(
        &mut self,
        samples: &[Sample],
        modality: ModalitySet,
        missing: &[usize],
        batch_size: usize,
    ) -> Result<()> {
        let head = self.head.as_ref().ok_or_else(|| Error::Config("model has no classifier head".into()))?;
        if samples.is_empty() {
            return Err(Error::EmptySplit("no samples to fit the classifier head on".into()));
        }
        let (mean_id, std_id, with_graph) = (head.feature_mean, head.feature_std, head.with_graph);
        let width = self.params.get(mean_id).cols();
        let mut sum = vec![0.0; width];
        let mut sum_sq = vec![0.0; width];
        for chunk in samples.chunks(batch_size.max(1)) {
            let batch: Vec<&Sample> = chunk.iter().collect();
            let mut t = Tape::new(&self.params);
            let f = self.head_features(&mut t, &batch, modality, missing, with_graph)?;
            let v = t.value(f);
            for r in 0..v.rows() {
                for (j, &x) in v.row(r).iter().enumerate() {
                    sum[j] += x;
                    sum_sq[j] += x * x;
                }
            }
        }
        let n = samples.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> =
            sum_sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(FEATURE_STD_FLOOR)).collect();
        *self.params.get_mut(mean_id) = Tensor::from_vec(1, width, mean);
        *self.params.get_mut(std_id) = Tensor::from_vec(1, width, std);
        Ok(())
    }

    /// Pooled unified features, followed by pooled graph features when `with_graph`.
    fn head_features(
        &self,
        t: &mut Tape,
        batch: &[&Sample],
        modality: ModalitySet,
        missing: &[usize],
        with_graph: bool,
    ) -> Result<Var> {
        self.check_inputs(batch, modality)?;
        let bsz = batch.len();
        let n_dev = self.config.devices.len();
        if let Some(&bad) = missing.iter().find(|&&d| d >= n_dev) {
            return Err(Error::UnknownDevice(format!("device index {bad}")));
        }
        let mut imu_enc = None;
        let mut video_enc = None;
        if modality.uses_imu() {
            let views: Vec<ImuView> = batch
                .iter()
                .map(|s| {
                    let g = s.imu.as_ref().unwrap();
                    let keep: Vec<usize> = (0..g.len()).filter(|&i| !missing.contains(&g.device_index[i])).collect();
                    ImuView::select(g, &keep)
                })
                .collect();
            let tb = self.encoders.embed_imu(t, &views)?;
            imu_enc = Some(self.encoders.encode_imu(t, &tb));
        }
        if modality.uses_video() {
            let views: Vec<VideoView> = batch.iter().map(|s| VideoView::all(s.video.as_ref().unwrap())).collect();
            let tb = self.encoders.embed_video(t, &views)?;
            video_enc = Some(self.encoders.encode_video(t, &tb));
        }
        let imu_tokens = imu_enc.as_ref().filter(|tb| !tb.is_empty());
        let d = self.config.encoder.embed_dim;
        let pooled = if imu_tokens.is_none() && video_enc.is_none() {
            t.constant(Tensor::zeros(bsz, d))
        } else {
            let unified = self.encoders.encode_unified(t, imu_tokens, video_enc.as_ref())?;
            self.encoders.pool(t, &unified, Pool::All)?
        };
        let features = if with_graph {
            let graph_pooled = match &imu_enc {
                Some(enc) => {
                    let f_d = self.device_features(t, enc);
                    let nodes: Vec<MaskPlan> = (0..bsz)
                        .map(|_| MaskPlan::from_indices(n_dev, missing.to_vec(), crate::masking::MaskStrategy::Node))
                        .collect::<Result<_>>()?;
                    let corrupted = self.graph.corrupt(t, f_d, &MaskPlan::concat(&nodes))?;
                    let adj = self.adjacency(t, bsz);
                    let encoded = self.graph.encode(t, adj, corrupted)?;
                    let groups: Vec<Vec<usize>> = (0..bsz).map(|b| (b * n_dev..(b + 1) * n_dev).collect()).collect();
                    let m = t.constant(mean_matrix(&groups, bsz * n_dev));
                    t.matmul(m, encoded)
                }
                None => t.constant(Tensor::zeros(bsz, d)),
            };
            t.concat_cols(&[pooled, graph_pooled])
        } else {
            pooled
        };
        Ok(features)
    }
}
