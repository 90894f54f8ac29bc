//! A small reverse-mode tape over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that (transitively) depends on a trainable leaf. Constants never
//! receive gradients, which is how stop-gradient is expressed: the teacher
//! network is bound with [`Graph::constant`] and so never enters the
//! differentiated graph.

use std::collections::HashMap;

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Im2Col3x3 {
        x: Var,
        height: usize,
        width: usize,
    },
    AvgPool2 {
        x: Var,
        height: usize,
        width: usize,
    },
    Upsample2 {
        x: Var,
        height: usize,
        width: usize,
    },
    Sum(Var),
    WeightedSum(Var, Matrix),
    MseConst(Var, Matrix),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(xv.cols(), rv.cols(), "add_row width mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let value = self.value(x).scale(alpha);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, alpha), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(silu_scalar);
        let ng = self.needs(x);
        self.push(value, Op::Silu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        let ng = self.needs(x);
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
        let ng = self.needs(x);
        self.push(value, Op::LogSoftmaxRows(x), ng)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value(gain);
        let bv = self.value(bias);
        assert_eq!(gv.shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(bv.shape(), (1, cols), "layer_norm bias shape");
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut value = normalized.clone();
        for r in 0..rows {
            for ((o, g), b) in value.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        )
    }

    /// Scales each row to unit Euclidean norm (norm floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::L2NormRows { x, norms }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_rows(start, len);
        let ng = self.needs(x);
        self.push(value, Op::SliceRows(x, start), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_cols(start, len);
        let ng = self.needs(x);
        self.push(value, Op::SliceCols(x, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Unfolds a `(height·width) × c` feature grid into `(height·width) × 9c`
    /// zero-padded 3×3 neighbourhoods; column `k·c + ch` holds offset `k`
    /// (row-major over dy, dx ∈ {-1, 0, 1}).
    pub fn im2col3x3(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), height * width, "im2col grid mismatch");
        let c = xv.cols();
        let mut value = Matrix::zeros(height * width, 9 * c);
        for y in 0..height {
            for xx in 0..width {
                let out = value.row_mut(y * width + xx);
                for k in 0..9 {
                    let sy = y as isize + (k / 3) as isize - 1;
                    let sx = xx as isize + (k % 3) as isize - 1;
                    if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                        continue;
                    }
                    let src = xv.row(sy as usize * width + sx as usize);
                    out[k * c..(k + 1) * c].copy_from_slice(src);
                }
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Im2Col3x3 { x, height, width }, ng)
    }

    /// 2×2 average pooling of a `(height·width) × c` grid.
    pub fn avg_pool2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert!(height % 2 == 0 && width % 2 == 0, "avg_pool2 needs even dims");
        assert_eq!(xv.rows(), height * width, "avg_pool2 grid mismatch");
        let (oh, ow, c) = (height / 2, width / 2, xv.cols());
        let mut value = Matrix::zeros(oh * ow, c);
        for y in 0..oh {
            for xx in 0..ow {
                let out = value.row_mut(y * ow + xx);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = xv.row((2 * y + dy) * width + 2 * xx + dx);
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += 0.25 * s;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::AvgPool2 { x, height, width }, ng)
    }

    /// Nearest-neighbour 2× upsampling of a `(height·width) × c` grid.
    pub fn upsample2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), height * width, "upsample2 grid mismatch");
        let (oh, ow, c) = (height * 2, width * 2, xv.cols());
        let mut value = Matrix::zeros(oh * ow, c);
        for y in 0..oh {
            for xx in 0..ow {
                value
                    .row_mut(y * ow + xx)
                    .copy_from_slice(xv.row((y / 2) * width + xx / 2));
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Upsample2 { x, height, width }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(x).sum()]);
        let ng = self.needs(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// `Σ weights ⊙ x` for a constant weight matrix.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "weighted_sum shape mismatch");
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let ng = self.needs(x);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::WeightedSum(x, weights), ng)
    }

    /// Mean squared error between `x` and a constant target.
    pub fn mse(&mut self, x: Var, target: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        let n = xv.len().max(1) as f64;
        let s = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.needs(x);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::MseConst(x, target), ng)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m[(0, 0)]
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, false, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(g, true, av, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, g.sum_rows());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), |d, y| d * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), |d, x| d * x);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, alpha) => self.accumulate(grads, *x, g.scale(*alpha)),
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |d, v| d * gelu_grad(v));
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), |d, v| {
                    let s = sigmoid(v);
                    d * s * (1.0 + v * (1.0 - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, p)| d * p).sum();
                    for ((o, d), p) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = p * (d - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for ((o, d), ly) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = d - ly.exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                if self.needs(*gain) {
                    let gg = g.zip_map(normalized, |d, n| d * n).sum_rows();
                    self.accumulate(grads, *gain, gg);
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, g.sum_rows());
                }
                if self.needs(*x) {
                    let gain_v = self.value(*gain);
                    let cols = normalized.cols();
                    let mut gx = Matrix::zeros(normalized.rows(), cols);
                    let mut dn = vec![0.0; cols];
                    for r in 0..normalized.rows() {
                        for ((o, d), gv) in dn.iter_mut().zip(g.row(r)).zip(gain_v.data()) {
                            *o = d * gv;
                        }
                        let nrow = normalized.row(r);
                        let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                        let mean_dn_n =
                            dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((o, d), n) in gx.row_mut(r).iter_mut().zip(&dn).zip(nrow) {
                            *o = inv_std[r] * (d - mean_dn - n * mean_dn_n);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, v)| d * v).sum();
                    for ((o, d), v) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (d - v * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, cols));
                    }
                    offset += cols;
                }
            }
            Op::Im2Col3x3 { x, height, width } => {
                let (h, w) = (*height, *width);
                let c = self.value(*x).cols();
                let mut gx = Matrix::zeros(h * w, c);
                for y in 0..h {
                    for xx in 0..w {
                        let src = g.row(y * w + xx);
                        for k in 0..9 {
                            let sy = y as isize + (k / 3) as isize - 1;
                            let sx = xx as isize + (k % 3) as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let dst = gx.row_mut(sy as usize * w + sx as usize);
                            for (o, s) in dst.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                                *o += s;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool2 { x, height, width } => {
                let (h, w) = (*height, *width);
                let ow = w / 2;
                let c = g.cols();
                let mut gx = Matrix::zeros(h * w, c);
                for y in 0..h {
                    for xx in 0..w {
                        let src = g.row((y / 2) * ow + xx / 2);
                        for (o, s) in gx.row_mut(y * w + xx).iter_mut().zip(src) {
                            *o = 0.25 * s;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample2 { x, height, width } => {
                let (h, w) = (*height, *width);
                let ow = w * 2;
                let c = g.cols();
                let mut gx = Matrix::zeros(h * w, c);
                for y in 0..h * 2 {
                    for xx in 0..ow {
                        let src = g.row(y * ow + xx);
                        for (o, s) in gx.row_mut((y / 2) * w + xx / 2).iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), g[(0, 0)]));
            }
            Op::WeightedSum(x, weights) => {
                self.accumulate(grads, *x, weights.scale(g[(0, 0)]));
            }
            Op::MseConst(x, target) => {
                let xv = self.value(*x);
                let k = 2.0 * g[(0, 0)] / xv.len().max(1) as f64;
                self.accumulate(grads, *x, xv.zip_map(target, |a, b| k * (a - b)));
            }
        }
    }
}

/// Named trainable arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Registers every array on the graph, as trainable leaves or constants.
    pub fn bind<'a>(&'a self, graph: &mut Graph, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] registered on a [`Graph`].
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .set
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects per-parameter gradients in the set's order (zeros where none flowed).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Matrix> {
        self.vars
            .iter()
            .zip(self.set.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }
}
