//! Device feature graph and its masked GIN autoencoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{Embedding, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GinConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub learn_epsilon: bool,
    pub epsilon_init: f64,
}

impl GinConfig {
    pub fn desk() -> Self {
        Self { layers: 2, hidden_dim: 64, learn_epsilon: true, epsilon_init: 0.0 }
    }

    pub fn paper() -> Self {
        Self { layers: 2, hidden_dim: 768, learn_epsilon: true, epsilon_init: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("GIN needs at least one layer and a positive hidden width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImuGraph {
    pub nodes: Vec<String>,
    /// Symmetric 0/1, zero diagonal.
    pub adjacency: Tensor,
    pub features: Tensor,
}

/// Fully connected adjacency without self loops.
pub fn full_adjacency(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |r, c| if r == c { 0.0 } else { 1.0 })
}

pub fn build_graph(nodes: &[String], features: Tensor) -> Result<ImuGraph> {
    if features.rows() != nodes.len() {
        return Err(Error::Shape(format!("{} feature rows for {} nodes", features.rows(), nodes.len())));
    }
    Ok(ImuGraph { nodes: nodes.to_vec(), adjacency: full_adjacency(nodes.len()), features })
}

/// `batch` copies of `adj` on the block diagonal.
pub fn block_diagonal(adj: &Tensor, batch: usize) -> Tensor {
    let n = adj.rows();
    let mut out = Tensor::zeros(n * batch, n * batch);
    for b in 0..batch {
        for r in 0..n {
            for c in 0..n {
                out.set(b * n + r, b * n + c, adj.get(r, c));
            }
        }
    }
    out
}

/// `h' = MLP((1 + ε)·h + A·h)`.
#[derive(Clone, Debug)]
pub struct GinLayer {
    pub epsilon: ParamId,
    pub learn_epsilon: bool,
    pub mlp: Mlp,
}

impl GinLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &GinConfig,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            epsilon: store.add(format!("{name}.epsilon"), Tensor::scalar(cfg.epsilon_init)),
            learn_epsilon: cfg.learn_epsilon,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), in_dim, cfg.hidden_dim, out_dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, adj: Var, h: Var) -> Var {
        let eps = if self.learn_epsilon {
            t.param(self.epsilon)
        } else {
            let v = t.store().get(self.epsilon).clone();
            t.constant(v)
        };
        let neighbours = t.matmul(adj, h);
        let scaled = t.mul_scalar(h, eps);
        let own = t.add(h, scaled);
        let z = t.add(own, neighbours);
        self.mlp.forward(t, z)
    }
}

/// Stack of GIN layers mapping `width → width`.
#[derive(Clone, Debug)]
pub struct Gin {
    pub layers: Vec<GinLayer>,
}

impl Gin {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &GinConfig, width: usize) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                let in_dim = if i == 0 { width } else { cfg.hidden_dim };
                let out_dim = if i + 1 == cfg.layers { width } else { cfg.hidden_dim };
                GinLayer::new(store, rng, &format!("{name}.{i}"), cfg, in_dim, out_dim)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, t: &mut Tape, adj: Var, mut h: Var) -> Var {
        let shape = t.shape(h);
        for l in &self.layers {
            h = l.forward(t, adj, h);
        }
        assert_eq!(t.shape(h), shape, "graph network must preserve node features' shape");
        h
    }
}

#[derive(Clone, Debug)]
pub struct GraphBranch {
    pub encoder_mask: Embedding,
    pub decoder_mask: Embedding,
    pub encoder: Gin,
    pub decoder: Gin,
    pub feature_dim: usize,
}

/// Replace the plan's rows of `x` with a single token row.
fn replace_rows(t: &mut Tape, x: Var, token: Var, plan: &MaskPlan) -> Result<Var> {
    let rows = t.shape(x).0;
    if plan.total != rows {
        return Err(Error::Shape(format!("node mask covers {} rows, features have {rows}", plan.total)));
    }
    if plan.masked_indices.is_empty() {
        return Ok(x);
    }
    let stacked = t.concat_rows(&[x, token]);
    let flags = plan.flags();
    let index: Vec<usize> = (0..rows).map(|r| if flags[r] { rows } else { r }).collect();
    Ok(t.gather_rows(stacked, &index))
}

impl GraphBranch {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &GinConfig, feature_dim: usize) -> Self {
        Self {
            encoder_mask: Embedding::new(store, rng, "graph.encoder_mask", 1, feature_dim),
            decoder_mask: Embedding::new(store, rng, "graph.decoder_mask", 1, feature_dim),
            encoder: Gin::new(store, rng, "graph.encoder", cfg, feature_dim),
            decoder: Gin::new(store, rng, "graph.decoder", cfg, feature_dim),
            feature_dim,
        }
    }

    /// Masked rows ← encoder mask token.
    pub fn corrupt(&self, t: &mut Tape, features: Var, plan: &MaskPlan) -> Result<Var> {
        let token = self.encoder_mask.row(t);
        replace_rows(t, features, token, plan)
    }

    /// Masked rows ← decoder mask token.
    pub fn remask(&self, t: &mut Tape, encoded: Var, plan: &MaskPlan) -> Result<Var> {
        let token = self.decoder_mask.row(t);
        replace_rows(t, encoded, token, plan)
    }

    pub fn encode(&self, t: &mut Tape, adj: Var, corrupted: Var) -> Result<Var> {
        self.check(t, adj, corrupted)?;
        Ok(self.encoder.forward(t, adj, corrupted))
    }

    pub fn decode(&self, t: &mut Tape, adj: Var, remasked: Var) -> Result<Var> {
        self.check(t, adj, remasked)?;
        Ok(self.decoder.forward(t, adj, remasked))
    }

    fn check(&self, t: &Tape, adj: Var, h: Var) -> Result<()> {
        let (n, f) = t.shape(h);
        let (ar, ac) = t.shape(adj);
        if ar != n || ac != n || f != self.feature_dim {
            return Err(Error::Shape(format!(
                "graph of {n}x{f} features with {ar}x{ac} adjacency (feature width {})",
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// corrupt → encode → remask → decode; returns `(encoded, reconstructed)`.
    pub fn autoencode(&self, t: &mut Tape, adj: Var, features: Var, plan: &MaskPlan) -> Result<(Var, Var)> {
        let corrupted = self.corrupt(t, features, plan)?;
        let encoded = self.encode(t, adj, corrupted)?;
        let remasked = self.remask(t, encoded, plan)?;
        let decoded = self.decode(t, adj, remasked)?;
        Ok((encoded, decoded))
    }
}
