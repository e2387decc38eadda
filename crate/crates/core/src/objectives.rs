//! Reconstruction, graph cosine and contrastive losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 10.0, gamma: 0.01, tau: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mse_video: f64,
    pub l_mse_imu: f64,
    pub l_cos: f64,
    pub l_con: f64,
    pub total: f64,
}

/// `α(mse_video + mse_imu) + β·cos + γ·con`.
pub fn total_loss(l_mse_video: f64, l_mse_imu: f64, l_cos: f64, l_con: f64, w: &LossWeights) -> LossReport {
    LossReport {
        l_mse_video,
        l_mse_imu,
        l_cos,
        l_con,
        total: w.alpha * (l_mse_video + l_mse_imu) + w.beta * l_cos + w.gamma * l_con,
    }
}

/// Mean squared error per element over `rows` (all rows when `None`).
/// An empty row set contributes zero.
pub fn pixel_mse(t: &mut Tape, pred: Var, target: &Tensor, rows: Option<&[usize]>) -> Result<Var> {
    if t.shape(pred) != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", t.shape(pred), target.shape())));
    }
    let (p, tv) = match rows {
        None => (pred, t.constant(target.clone())),
        Some([]) => return Ok(t.constant(Tensor::scalar(0.0))),
        Some(rows) => {
            let mut data = Vec::with_capacity(rows.len() * target.cols());
            for &r in rows {
                data.extend_from_slice(target.row(r));
            }
            (t.gather_rows(pred, rows), t.constant(Tensor::from_vec(rows.len(), target.cols(), data)))
        }
    };
    let d = t.sub(p, tv);
    let sq = t.mul(d, d);
    Ok(t.mean(sq))
}

/// Mean over `masked` rows of `1 − cos(pred_r, target_r)`.
pub fn graph_cosine_loss(t: &mut Tape, pred: Var, target: Var, masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::EmptyMask);
    }
    if t.shape(pred) != t.shape(target) {
        return Err(Error::Shape(format!("reconstruction {:?} vs features {:?}", t.shape(pred), t.shape(target))));
    }
    for &r in masked {
        for v in [pred, target] {
            let norm = t.value(v).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(Error::ZeroNorm);
            }
        }
    }
    let p = t.gather_rows(pred, masked);
    let g = t.gather_rows(target, masked);
    let p = t.l2_normalize_rows(p);
    let g = t.l2_normalize_rows(g);
    let prod = t.mul(p, g);
    let cos = t.sum_cols(prod);
    let mean_cos = t.mean(cos);
    let neg = t.scale(mean_cos, -1.0);
    let one = t.constant(Tensor::scalar(1.0));
    Ok(t.add(one, neg))
}

/// Symmetric InfoNCE over a `batch × batch` similarity matrix whose entry
/// `(k, j)` is `s(video_k, imu_j)`.
pub fn contrastive_from_similarity(t: &mut Tape, sim: Var, tau: f64) -> Result<Var> {
    let (n, m) = t.shape(sim);
    if n != m || n == 0 {
        return Err(Error::Shape(format!("similarity matrix must be square and non-empty, got {n}x{m}")));
    }
    let logits = t.scale(sim, 1.0 / tau);
    let rows = t.log_softmax_rows(logits);
    let lt = t.transpose(logits);
    let cols = t.log_softmax_rows(lt);
    let eye = t.constant(Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 }));
    let both = t.add(rows, cols);
    let diag = t.mul(both, eye);
    let s = t.sum(diag);
    Ok(t.scale(s, -1.0 / (2.0 * n as f64)))
}

/// InfoNCE between L2-normalised pooled video and IMU features.
pub fn contrastive_loss(t: &mut Tape, video: Var, imu: Var, tau: f64) -> Result<Var> {
    if t.shape(video) != t.shape(imu) {
        return Err(Error::Shape(format!("video {:?} vs IMU {:?} features", t.shape(video), t.shape(imu))));
    }
    let v = t.l2_normalize_rows(video);
    let i = t.l2_normalize_rows(imu);
    let sim = t.matmul_nt(v, i);
    contrastive_from_similarity(t, sim, tau)
}

/// Mean cross-entropy of softmax(`logits`) against integer `labels`.
pub fn cross_entropy(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = t.shape(logits);
    if n != labels.len() || n == 0 {
        return Err(Error::Shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!("label {l} outside {c} classes")));
    }
    let logp = t.log_softmax_rows(logits);
    let onehot = t.constant(Tensor::from_fn(n, c, |r, k| if labels[r] == k { 1.0 } else { 0.0 }));
    let picked = t.mul(logp, onehot);
    let s = t.sum(picked);
    Ok(t.scale(s, -1.0 / n as f64))
}
