//! Layers shared by the encoders, the pixel decoder and the graph branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{normal, xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.weight);
        let b = t.param(self.bias);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.norm_rows(x);
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        let y = t.mul_row(n, g);
        t.add_row(y, b)
    }
}

/// Linear → GELU → linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, segments: &[(usize, usize)]) -> Var {
        let q = self.query.forward(t, x);
        let k = self.key.forward(t, x);
        let v = self.value.forward(t, x);
        let a = t.attention(q, k, v, self.heads, segments);
        self.out.forward(t, a)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, mlp_ratio: f64) -> Self {
        let hidden = ((dim as f64 * mlp_ratio).round() as usize).max(1);
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, hidden, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, segments: &[(usize, usize)]) -> Var {
        let h = self.norm1.forward(t, x);
        let h = self.attn.forward(t, h, segments);
        let x = t.add(x, h);
        let h = self.norm2.forward(t, x);
        let h = self.mlp.forward(t, h);
        t.add(x, h)
    }
}

/// A stack of blocks; tokens attend only within their segment.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<Block>,
}

impl Transformer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
    ) -> Self {
        let blocks = (0..depth).map(|i| Block::new(store, rng, &format!("{name}.{i}"), dim, heads, mlp_ratio)).collect();
        Self { blocks }
    }

    pub fn forward(&self, t: &mut Tape, mut x: Var, segments: &[(usize, usize)]) -> Var {
        let shape = t.shape(x);
        for b in &self.blocks {
            x = b.forward(t, x, segments);
        }
        assert_eq!(t.shape(x), shape, "transformer must preserve shape");
        x
    }
}

/// Learned table of vectors looked up by row index.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, rows: usize, dim: usize) -> Self {
        Self { table: store.add(name, normal(rng, rows, dim, EMBED_INIT_STD)) }
    }

    pub fn lookup(&self, t: &mut Tape, index: &[usize]) -> Var {
        let table = t.param(self.table);
        t.gather_rows(table, index)
    }

    pub fn row(&self, t: &mut Tape) -> Var {
        t.param(self.table)
    }
}

/// `[sin(p·ω_i) …, cos(p·ω_i) …]` with `ω_i = 10000^(−2i/dim)`.
pub fn sincos(position: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal width must be even, got {dim}");
    let half = dim / 2;
    let omega = |i: usize| 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
    let mut out: Vec<f64> = (0..half).map(|i| (position * omega(i)).sin()).collect();
    out.extend((0..half).map(|i| (position * omega(i)).cos()));
    out
}

/// Widths for (time, height, width) in a 3-D factorised table.
pub fn split_3d(dim: usize) -> (usize, usize, usize) {
    let hw = (dim / 3) & !1;
    let t = dim - 2 * hw;
    assert!(hw > 0 && t % 2 == 0, "width {dim} cannot be split into three even parts");
    (t, hw, hw)
}

/// Rows for `(time, freq)` grid cells: half the width per axis.
pub fn sincos_2d(cells: &[(usize, usize)], dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "2-D sinusoidal width must be a multiple of 4, got {dim}");
    let mut data = Vec::with_capacity(cells.len() * dim);
    for &(a, b) in cells {
        data.extend(sincos(a as f64, dim / 2));
        data.extend(sincos(b as f64, dim / 2));
    }
    Tensor::from_vec(cells.len(), dim, data)
}

/// Rows for `(t, h, w)` grid cells.
pub fn sincos_3d(cells: &[(usize, usize, usize)], dim: usize) -> Tensor {
    let (dt, dh, dw) = split_3d(dim);
    let mut data = Vec::with_capacity(cells.len() * dim);
    for &(a, b, c) in cells {
        data.extend(sincos(a as f64, dt));
        data.extend(sincos(b as f64, dh));
        data.extend(sincos(c as f64, dw));
    }
    Tensor::from_vec(cells.len(), dim, data)
}

/// Row-stochastic matrix averaging the listed rows of a token matrix into
/// one output row per group.
pub fn mean_matrix(groups: &[Vec<usize>], tokens: usize) -> Tensor {
    let mut m = Tensor::zeros(groups.len(), tokens);
    for (g, members) in groups.iter().enumerate() {
        let w = 1.0 / members.len() as f64;
        for &i in members {
            m.set(g, i, w);
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Imu,
    Video,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::from_fn(rows, cols, |r, c| (((r * 31 + c * 17) as u64 + seed * 7919) % 97) as f64 / 48.5 - 1.0)
    }

    #[test]
    fn sincos_layout() {
        let v = sincos(0.0, 8);
        assert_eq!(v, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let v = sincos(3.0, 4);
        assert!((v[0] - 3f64.sin()).abs() < 1e-15);
        assert!((v[1] - (3.0 / 100.0f64).sin()).abs() < 1e-15);
        assert_eq!(split_3d(64), (24, 20, 20));
        assert_eq!(split_3d(768), (256, 256, 256));
        assert_eq!(split_3d(32), (12, 10, 10));
        let t = sincos_3d(&[(1, 2, 3)], 64);
        assert_eq!(&t.row(0)[24..44], &sincos(2.0, 20)[..]);
    }

    #[test]
    fn single_token_attention_is_its_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, &[]);
        let attn = SelfAttention::new(&mut store, &mut rng, "a", 8, 2);
        let mut t = Tape::new(&store);
        let x = t.constant(sample(1, 8, 3));
        let y = attn.forward(&mut t, x, &[(0, 1)]);
        let v = attn.value.forward(&mut t, x);
        let want = attn.out.forward(&mut t, v);
        assert!(t.value(y).max_abs_diff(t.value(want)) < 1e-12);
    }

    #[test]
    fn blocks_are_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(2, &[]);
        let tf = Transformer::new(&mut store, &mut rng, "tf", 2, 8, 2, 4.0);
        let x = sample(5, 8, 4);
        let perm = [3, 0, 4, 1, 2];
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let y = tf.forward(&mut t, xv, &[(0, 5)]);
        let xp = t.gather_rows(xv, &perm);
        let yp = tf.forward(&mut t, xp, &[(0, 5)]);
        let want = t.gather_rows(y, &perm);
        assert!(t.value(yp).max_abs_diff(t.value(want)) < 1e-12);
    }

    #[test]
    fn segments_isolate_samples() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(3, &[]);
        let tf = Transformer::new(&mut store, &mut rng, "tf", 1, 8, 2, 2.0);
        let (a, b) = (sample(3, 8, 5), sample(2, 8, 6));
        let mut t = Tape::new(&store);
        let av = t.constant(a);
        let bv = t.constant(b);
        let ab = t.concat_rows(&[av, bv]);
        let joint = tf.forward(&mut t, ab, &[(0, 3), (3, 2)]);
        let alone = tf.forward(&mut t, bv, &[(0, 2)]);
        let tail = t.gather_rows(joint, &[3, 4]);
        assert!(t.value(tail).max_abs_diff(t.value(alone)) < 1e-12);
    }

    #[test]
    fn mean_matrix_averages() {
        let m = mean_matrix(&[vec![0, 2], vec![1]], 3);
        let x = Tensor::from_vec(3, 1, vec![1.0, 5.0, 3.0]);
        assert_eq!(m.matmul(&x).data(), &[2.0, 5.0]);
    }
}
