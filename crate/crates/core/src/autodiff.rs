//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! bound lazily from a [`ParamStore`]; calling [`Tape::backward`] walks the
//! tape in reverse and returns the gradient of a scalar with respect to every
//! bound parameter. Nodes that depend on no parameter are never visited.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-5;
const L2_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    NormRows { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<Tensor> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant that still gets a gradient slot; used to differentiate
    /// with respect to inputs (e.g. in finite-difference checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param, true);
        self.bound.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `1 × cols` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1x{} row", av.cols());
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by the `1 × cols` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row expects a 1x{} row", av.cols());
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `a * s` for a `1 × 1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + 1e-5)` without affine terms.
    pub fn norm_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols() as f64;
        let mut value = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let ng = self.ng(x);
        self.push(value, Op::NormRows { x, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::LogSoftmaxRows(x), ng)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(value, Op::L2NormalizeRows { x, norms }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let value = Tensor::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        let ng = self.ng(x);
        self.push(value, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `out[i] = x[index[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xv = self.value(x);
        let mut value = Tensor::zeros(index.len(), xv.cols());
        for (i, &src) in index.iter().enumerate() {
            assert!(src < xv.rows(), "gather_rows index {src} out of range {}", xv.rows());
            value.row_mut(i).copy_from_slice(xv.row(src));
        }
        let ng = self.ng(x);
        self.push(value, Op::GatherRows { x, index: index.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Column means: `n × d → 1 × d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.rows() > 0, "mean_rows of an empty matrix");
        let n = xv.rows() as f64;
        let value = Tensor::from_fn(1, xv.cols(), |_, c| (0..xv.rows()).map(|r| xv.get(r, c)).sum::<f64>() / n);
        let ng = self.ng(x);
        self.push(value, Op::MeanRows(x), ng)
    }

    /// Row sums: `n × d → n × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_fn(xv.rows(), 1, |r, _| xv.row(r).iter().sum());
        let ng = self.ng(x);
        self.push(value, Op::SumCols(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        assert!(n > 0, "mean of an empty matrix");
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(value, Op::Transpose(x), ng)
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are `n × d`
    /// projections whose columns split into `heads` equal blocks; each
    /// `(start, len)` segment of rows attends only within itself.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[(usize, usize)]) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!(self.shape(k), (n, d), "attention key shape");
        assert_eq!(self.shape(v), (n, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "{d} columns do not split into {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            assert!(start + len <= n, "attention segment out of range");
            for h in 0..heads {
                let qs = block(self.value(q), start, len, h * dh, dh);
                let ks = block(self.value(k), start, len, h * dh, dh);
                let vs = block(self.value(v), start, len, h * dh, dh);
                let mut p = qs.matmul_nt(&ks);
                p.scale_assign(scale);
                softmax_in_place(&mut p);
                put_block(&mut out, &p.matmul(&vs), start, h * dh);
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, segments: segments.to_vec(), probs }, ng)
    }

    /// Sum of several `1 × 1` values (or any equally-shaped values).
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Gradient of the scalar `root` with respect to everything recorded.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_seeded(&[(root, Tensor::scalar(1.0))])
    }

    /// Reverse pass starting from arbitrary output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.bound {
            if let Some(g) = &grads[v.0] {
                params.insert(id, g.clone());
            }
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(gy, false, bv, true, &mut ga, 0.0);
                    accumulate(&mut grads[a.0], ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, gy, false, &mut gb, 0.0);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy.matmul(bv));
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], gy.matmul_tn(av));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy.clone());
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy.clone());
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy.zip_map(self.value(*b), |g, x| g * x));
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], gy.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy.clone());
                }
                if self.ng(*row) {
                    accumulate(&mut grads[row.0], column_sums(gy));
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.ng(*a) {
                    let mut ga = gy.clone();
                    for r in 0..ga.rows() {
                        for (g, s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *g *= s;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.ng(*row) {
                    accumulate(&mut grads[row.0], column_sums(&gy.zip_map(av, |g, x| g * x)));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(&mut grads[a.0], gy.map(|g| g * s));
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy.map(|g| g * k));
                }
                if self.ng(*s) {
                    let d = gy.data().iter().zip(self.value(*a).data()).map(|(g, x)| g * x).sum();
                    accumulate(&mut grads[s.0], Tensor::scalar(d));
                }
            }
            Op::Gelu(a) => {
                let ga = gy.zip_map(self.value(*a), |g, x| {
                    let u = GELU_C * (x + GELU_K * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                accumulate(&mut grads[a.0], ga);
            }
            Op::NormRows { x, inv_std } => {
                let cols = y.cols() as f64;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = gr.iter().zip(yr).map(|(g, v)| g * v).sum::<f64>() / cols;
                    let s = inv_std[r];
                    for ((o, g), v) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = s * (g - mean_g - v * mean_gy);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, g), v) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = v * (g - dot);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, g), v) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = g - v.exp() * total;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, g), v) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (g - v * dot) / norms[r];
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..gy.rows() {
                    gx.row_mut(r)[*start..*start + gy.cols()].copy_from_slice(gy.row(r));
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.ng(*p) {
                        let g = Tensor::from_fn(gy.rows(), w, |r, c| gy.get(r, offset + c));
                        accumulate(&mut grads[p.0], g);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, &src) in index.iter().enumerate() {
                    for (o, g) in gx.row_mut(src).iter_mut().zip(gy.row(i)) {
                        *o += g;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    if self.ng(*p) {
                        let g = Tensor::from_vec(rows, cols, gy.data()[offset * cols..(offset + rows) * cols].to_vec());
                        accumulate(&mut grads[p.0], g);
                    }
                    offset += rows;
                }
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let inv = 1.0 / rows as f64;
                let gx = Tensor::from_fn(rows, cols, |_, c| gy.get(0, c) * inv);
                accumulate(&mut grads[x.0], gx);
            }
            Op::SumCols(x) => {
                let (rows, cols) = self.shape(*x);
                let gx = Tensor::from_fn(rows, cols, |r, _| gy.get(r, 0));
                accumulate(&mut grads[x.0], gx);
            }
            Op::SumAll(x) => {
                let (rows, cols) = self.shape(*x);
                accumulate(&mut grads[x.0], Tensor::full(rows, cols, gy.item()));
            }
            Op::Transpose(x) => {
                accumulate(&mut grads[x.0], gy.transpose());
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                let (n, d) = y.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (mut gq, mut gk, mut gv) = (Tensor::zeros(n, d), Tensor::zeros(n, d), Tensor::zeros(n, d));
                let mut pi = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let go = block(gy, start, len, h * dh, dh);
                        let qs = block(self.value(*q), start, len, h * dh, dh);
                        let ks = block(self.value(*k), start, len, h * dh, dh);
                        let vs = block(self.value(*v), start, len, h * dh, dh);
                        put_block(&mut gv, &p.matmul_tn(&go), start, h * dh);
                        let gp = go.matmul_nt(&vs);
                        let mut gs = Tensor::zeros(len, len);
                        for r in 0..len {
                            let (pr, gr) = (p.row(r), gp.row(r));
                            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for (o, (a, b)) in gs.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                                *o = a * (b - dot) * scale;
                            }
                        }
                        put_block(&mut gq, &gs.matmul(&ks), start, h * dh);
                        put_block(&mut gk, &gs.matmul_tn(&qs), start, h * dh);
                    }
                }
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.ng(var) {
                        accumulate(&mut grads[var.0], g);
                    }
                }
            }
        }
    }
}

fn block(t: &Tensor, row: usize, rows: usize, col: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |r, c| t.get(row + r, col + c))
}

fn put_block(t: &mut Tensor, b: &Tensor, row: usize, col: usize) {
    for r in 0..b.rows() {
        t.row_mut(row + r)[col..col + b.cols()].copy_from_slice(b.row(r));
    }
}

fn softmax_in_place(t: &mut Tensor) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of a reverse pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_param_grads(self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::new(store.len());
        for (id, g) in self.params {
            out.grads[id.0] = Some(g);
        }
        out
    }
}

/// Per-parameter gradients indexed by [`ParamId`]; `None` means untouched.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        Self { grads: (0..len).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = g {
                accumulate(slot, g.clone());
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    /// Euclidean norm of one parameter's gradient (0 when untouched).
    pub fn norm(&self, id: ParamId) -> f64 {
        self.get(id).map_or(0.0, |g| g.data().iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` with respect to the single input tensor.
    fn check(input: Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(input.clone());
        let y = f(&mut tape, x);
        let analytic = tape.backward(y).wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.data_mut()[i] += delta;
                let mut t = Tape::new(&store);
                let x = t.input(p);
                let y = f(&mut t, x);
                t.value(y).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            assert!(err < 1e-5 || (a - numeric).abs() < 1e-9, "element {i}: analytic {a} numeric {numeric}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::from_fn(rows, cols, |r, c| (((r * 31 + c * 17) as u64 + seed * 7919) % 97) as f64 / 48.5 - 1.0)
    }

    /// Reduce to a scalar through a fixed random projection so every output element matters.
    fn project(t: &mut Tape, y: Var) -> Var {
        let (r, c) = t.shape(y);
        let w = t.constant(sample(r, c, 99));
        let m = t.mul(y, w);
        t.sum(m)
    }

    #[test]
    fn elementwise_ops() {
        check(sample(3, 4, 1), |t, x| {
            let g = t.gelu(x);
            project(t, g)
        });
        check(sample(3, 4, 2), |t, x| {
            let sq = t.mul(x, x);
            let d = t.sub(sq, x);
            let s = t.scale(d, 0.7);
            project(t, s)
        });
    }

    #[test]
    fn row_broadcasts() {
        let row = sample(1, 4, 5);
        check(sample(3, 4, 3), |t, x| {
            let r = t.constant(row.clone());
            let a = t.add_row(x, r);
            let m = t.mul_row(a, r);
            project(t, m)
        });
        let base = sample(3, 4, 6);
        check(row.clone(), |t, r| {
            let x = t.constant(base.clone());
            let a = t.mul_row(x, r);
            let b = t.add_row(a, r);
            project(t, b)
        });
    }

    #[test]
    fn normalisations() {
        check(sample(3, 5, 4), |t, x| {
            let n = t.norm_rows(x);
            project(t, n)
        });
        check(sample(3, 5, 7), |t, x| {
            let n = t.softmax_rows(x);
            project(t, n)
        });
        check(sample(3, 5, 8), |t, x| {
            let n = t.log_softmax_rows(x);
            project(t, n)
        });
        check(sample(3, 5, 9), |t, x| {
            let n = t.l2_normalize_rows(x);
            project(t, n)
        });
    }

    #[test]
    fn products_and_structure() {
        let other = sample(4, 3, 11);
        check(sample(2, 4, 10), |t, x| {
            let o = t.constant(other.clone());
            let m = t.matmul(x, o);
            let n = t.matmul_nt(m, m);
            project(t, n)
        });
        check(sample(4, 3, 12), |t, x| {
            let s = t.slice_cols(x, 1, 2);
            let c = t.concat_cols(&[x, s]);
            let g = t.gather_rows(c, &[3, 0, 3, 1]);
            let r = t.concat_rows(&[g, c]);
            let tr = t.transpose(r);
            project(t, tr)
        });
        check(sample(4, 3, 13), |t, x| {
            let m = t.mean_rows(x);
            let s = t.sum_cols(x);
            let ps = project(t, s);
            let pm = project(t, m);
            t.add(ps, pm)
        });
        check(sample(1, 1, 14), |t, s| {
            let x = t.constant(sample(2, 3, 15));
            let m = t.mul_scalar(x, s);
            project(t, m)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", sample(2, 2, 1));
        let mut t = Tape::new(&store);
        let c = t.constant(sample(2, 2, 2));
        let w = t.param(id);
        assert_eq!(t.param(id), w);
        let m = t.matmul(c, w);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.wrt(c).is_none());
        assert!(g.param(id).is_some());
    }

    #[test]
    fn attention_matches_composed_ops_and_differentiates() {
        let (qv, kv, vv) = (sample(5, 4, 11), sample(5, 4, 12), sample(5, 4, 13));
        let segs = [(0, 3), (3, 2)];
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let (q, k, v) = (t.constant(qv.clone()), t.constant(kv.clone()), t.constant(vv.clone()));
        let fused = t.attention(q, k, v, 2, &segs);
        for &(start, len) in &segs {
            let idx: Vec<usize> = (start..start + len).collect();
            for h in 0..2 {
                let qs = t.gather_rows(q, &idx);
                let qs = t.slice_cols(qs, h * 2, 2);
                let ks = t.gather_rows(k, &idx);
                let ks = t.slice_cols(ks, h * 2, 2);
                let vs = t.gather_rows(v, &idx);
                let vs = t.slice_cols(vs, h * 2, 2);
                let s = t.matmul_nt(qs, ks);
                let s = t.scale(s, 1.0 / 2f64.sqrt());
                let p = t.softmax_rows(s);
                let o = t.matmul(p, vs);
                for r in 0..len {
                    for c in 0..2 {
                        let want = t.value(o).get(r, c);
                        assert!((t.value(fused).get(start + r, h * 2 + c) - want).abs() < 1e-12);
                    }
                }
            }
        }
        check(qv.clone(), |t, x| {
            let (k, v) = (t.constant(kv.clone()), t.constant(vv.clone()));
            let a = t.attention(x, k, v, 2, &segs);
            project(t, a)
        });
        check(kv.clone(), |t, x| {
            let (q, v) = (t.constant(qv.clone()), t.constant(vv.clone()));
            let a = t.attention(q, x, v, 2, &segs);
            project(t, a)
        });
        check(vv.clone(), |t, x| {
            let (q, k) = (t.constant(qv.clone()), t.constant(kv.clone()));
            let a = t.attention(q, k, x, 2, &segs);
            project(t, a)
        });
        // shared input feeding all three projections
        check(qv.clone(), |t, x| {
            let a = t.attention(x, x, x, 1, &[(0, 5)]);
            project(t, a)
        });
    }
}
