//! A small reverse-mode tape over [`Mat`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] then walks
//! the tape in reverse. One graph is built per training example, and parameter
//! gradients are folded into a [`GradStore`] afterwards. Parameters used several
//! times in one graph map to a single leaf, so shared weights accumulate their
//! gradient from every use.

use std::collections::HashMap;

use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{gemm, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Transpose(Var),
    MeanCols(Var),
    MeanRowsMasked { x: Var, keep: Vec<bool>, count: usize },
    MaskRows { x: Var, keep: Vec<bool> },
    PadCols(Var),
    SumScalars(Vec<Var>),
    /// Scalar function of one input whose gradient was computed in the forward pass.
    ScalarFn { x: Var, grad: Mat },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient (used by finite-difference checks).
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = Mat::zeros(m, n);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t {m}x{k} by ({n}x{k2})^T");
        let mut out = Mat::zeros(m, n);
        gemm(self.value(a), false, self.value(b), true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1x{n} row");
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `x * w + b` with `w: in x out` and `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gain), (1, n));
        assert_eq!(self.shape(bias), (1, n));
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Mat::zeros(m, n);
        let mut out = Mat::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..n {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(i);
            for j in 0..n {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax. Columns with `key_mask[j] == true` get weight exactly 0.
    ///
    /// Panics if a row has no unmasked column; callers validate masks first.
    pub fn softmax(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let (m, n) = self.shape(a);
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), n, "key mask length");
            assert!(mask.iter().any(|&p| !p), "every key is masked");
        }
        let av = self.value(a);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let row = av.row(i);
            let live = |j: usize| key_mask.is_none_or(|mk| !mk[j]);
            let max = (0..n)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(i);
            let mut sum = 0.0;
            for j in 0..n {
                if live(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= n, "column slice out of range");
        let xv = self.value(x);
        let mut out = Mat::zeros(m, len);
        for i in 0..m {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(m, n);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), m, "concat_cols row mismatch");
            for i in 0..m {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, _) = self.shape(x);
        assert!(start + len <= m, "row slice out of range");
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), n, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            m += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(m, n, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup; backward scatters into the selected rows.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let (m, n) = self.shape(x);
        let xv = self.value(x);
        let mut out = Mat::zeros(index.len(), n);
        for (r, &i) in index.iter().enumerate() {
            assert!(i < m, "gather index {i} out of range for {m} rows");
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Mean over columns: `m x n -> m x 1`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let xv = self.value(x);
        let data = (0..m).map(|i| xv.row(i).iter().sum::<f64>() / n as f64).collect();
        let ng = self.ng(x);
        self.push(Mat::from_vec(m, 1, data), Op::MeanCols(x), ng)
    }

    /// Mean over the rows with `keep[i] == true`: `m x n -> 1 x n`.
    pub fn mean_rows_masked(&mut self, x: Var, keep: &[bool]) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(keep.len(), m, "row mask length");
        let count = keep.iter().filter(|&&k| k).count();
        assert!(count > 0, "mean over zero rows");
        let xv = self.value(x);
        let mut out = vec![0.0; n];
        for i in (0..m).filter(|&i| keep[i]) {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        let ng = self.ng(x);
        self.push(
            Mat::from_vec(1, n, out),
            Op::MeanRowsMasked {
                x,
                keep: keep.to_vec(),
                count,
            },
            ng,
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let keep = vec![true; self.shape(x).0];
        self.mean_rows_masked(x, &keep)
    }

    /// Zeroes rows with `keep[i] == false`.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Var {
        let (m, _) = self.shape(x);
        assert_eq!(keep.len(), m, "row mask length");
        let mut out = self.value(x).clone();
        for i in (0..m).filter(|&i| !keep[i]) {
            out.row_mut(i).fill(0.0);
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            ng,
        )
    }

    /// Right-pads with zero columns up to `total` columns.
    pub fn pad_cols(&mut self, x: Var, total: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(total >= n, "pad_cols to {total} < {n}");
        let xv = self.value(x);
        let mut out = Mat::zeros(m, total);
        for i in 0..m {
            out.row_mut(i)[..n].copy_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        self.push(out, Op::PadCols(x), ng)
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut s = 0.0;
        for &p in parts {
            s += self.value(p).item();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::scalar(s), Op::SumScalars(parts.to_vec()), ng)
    }

    /// Records a scalar `value = f(x)` whose gradient `df/dx` is already known.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Mat) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "scalar_fn gradient shape");
        let ng = self.ng(x);
        self.push(Mat::scalar(value), Op::ScalarFn { x, grad }, ng)
    }

    /// `sum(weights .* x)`, used to scalarise outputs for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Mat) -> Var {
        let value = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.scalar_fn(x, value, weights.clone())
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Mat>], v: Var) -> Option<&'a mut Mat> {
        if !self.ng(v) {
            return None;
        }
        let (m, n) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Mat::zeros(m, n)))
    }

    fn propagate(&self, node: &Node, dy: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(dy, false, self.value(*b), true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(self.value(*a), true, dy, false, gb, 1.0);
                }
            }
            Op::MatMulT(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(dy, false, self.value(*b), false, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(dy, true, self.value(*a), false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(dy);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(dy);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(dy);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let gr = gr.data_mut();
                    for i in 0..dy.rows() {
                        for (g, d) in gr.iter_mut().zip(dy.row(i)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (g, d) in ga.data_mut().iter_mut().zip(dy.data()) {
                        *g += s * d;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = xhat.shape();
                if let Some(gb) = self.slot(grads, *bias) {
                    let gb = gb.data_mut();
                    for i in 0..m {
                        for (g, d) in gb.iter_mut().zip(dy.row(i)) {
                            *g += d;
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    let gg = gg.data_mut();
                    for i in 0..m {
                        for ((g, d), xh) in gg.iter_mut().zip(dy.row(i)).zip(xhat.row(i)) {
                            *g += d * xh;
                        }
                    }
                }
                let gain_v = self.value(*gain).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let d = dy.row(i);
                        let xh = xhat.row(i);
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dxhat[j] = d[j] * gain_v[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * xh[j];
                        }
                        let gr = gx.row_mut(i);
                        for j in 0..n {
                            gr[j] += inv_std[i] / nf * (nf * dxhat[j] - sum - xh[j] * dot);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let dr = dy.row(i);
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for ((g, &p), &q) in ga.row_mut(i).iter_mut().zip(yr).zip(dr) {
                            *g += p * (q - dot);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((g, &x), &d) in ga.data_mut().iter_mut().zip(xv.data()).zip(dy.data()) {
                        *g += d * gelu_grad(x);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((g, &p), &d) in ga.data_mut().iter_mut().zip(y.data()).zip(dy.data()) {
                        *g += d * p * (1.0 - p);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((g, &t), &d) in ga.data_mut().iter_mut().zip(y.data()).zip(dy.data()) {
                        *g += d * (1.0 - t * t);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let len = dy.cols();
                    for i in 0..dy.rows() {
                        for (g, d) in gx.row_mut(i)[*start..*start + len].iter_mut().zip(dy.row(i)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..dy.rows() {
                            for (g, d) in gp.row_mut(i).iter_mut().zip(&dy.row(i)[off..off + w]) {
                                *g += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = dy.cols();
                    let dst = &mut gx.data_mut()[start * n..(start + dy.rows()) * n];
                    for (g, d) in dst.iter_mut().zip(dy.data()) {
                        *g += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if let Some(gp) = self.slot(grads, p) {
                        let n = dy.cols();
                        for (g, d) in gp.data_mut().iter_mut().zip(&dy.data()[off * n..(off + h) * n]) {
                            *g += d;
                        }
                    }
                    off += h;
                }
            }
            Op::GatherRows { x, index } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        for (g, d) in gx.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.add_assign(&dy.transpose());
                }
            }
            Op::MeanCols(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.cols() as f64;
                    for i in 0..gx.rows() {
                        let d = dy.get(i, 0) / n;
                        for g in gx.row_mut(i) {
                            *g += d;
                        }
                    }
                }
            }
            Op::MeanRowsMasked { x, keep, count } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = *count as f64;
                    for i in (0..keep.len()).filter(|&i| keep[i]) {
                        for (g, d) in gx.row_mut(i).iter_mut().zip(dy.data()) {
                            *g += d / c;
                        }
                    }
                }
            }
            Op::MaskRows { x, keep } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in (0..keep.len()).filter(|&i| keep[i]) {
                        for (g, d) in gx.row_mut(i).iter_mut().zip(dy.row(i)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::PadCols(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.cols();
                    for i in 0..dy.rows() {
                        for (g, d) in gx.row_mut(i).iter_mut().zip(&dy.row(i)[..n]) {
                            *g += d;
                        }
                    }
                }
            }
            Op::SumScalars(parts) => {
                let d = dy.item();
                for &p in parts {
                    if let Some(gp) = self.slot(grads, p) {
                        gp.data_mut()[0] += d;
                    }
                }
            }
            Op::ScalarFn { x, grad } => {
                let d = dy.item();
                if let Some(gx) = self.slot(grads, *x) {
                    for (g, v) in gx.data_mut().iter_mut().zip(grad.data()) {
                        *g += d * v;
                    }
                }
            }
        }
    }

    /// Adds the gradient of every parameter leaf in this graph to `out`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, out: &mut GradStore) {
        let mut pairs: Vec<_> = self.params.iter().collect();
        pairs.sort_by_key(|(id, _)| **id);
        for (&id, &v) in pairs {
            if let Some(g) = grads.wrt(v) {
                out.add(id, g);
            }
        }
    }

    /// Parameter leaves created so far, in parameter order.
    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        let mut pairs: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        pairs.sort_by_key(|(id, _)| *id);
        pairs
    }
}
