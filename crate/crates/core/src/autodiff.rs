//! A small reverse-mode differentiation tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep. A node only
//! records a gradient when some input on its path requires one; frozen
//! parameters and constants therefore cost nothing on the backward pass.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
pub(crate) const BCE_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Im2Col { x: Var, height: usize, width: usize },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Matrix },
    SoftDice { pred: Var, target: Matrix, smooth: f64 },
    Bce { pred: Var, target: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is recorded, independent of any named parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Returns the leaf for a named parameter, creating it on first use.
    pub fn param(&mut self, name: &str, value: &Matrix, trainable: bool) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row expects a single row");
        assert_eq!(vx.cols(), vr.cols(), "add_row width mismatch");
        let mut value = vx.clone();
        let r = vr.row(0).to_vec();
        for i in 0..value.rows() {
            for (a, b) in value.row_mut(i).iter_mut().zip(&r) {
                *a += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scaled(s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols), "layer_norm gamma shape");
        assert_eq!(b.shape(), (1, cols), "layer_norm beta shape");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let r = vx.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (r[j] - mean) * is;
                xhat.set(i, j, h);
                value.set(i, j, h * g.get(0, j) + b.get(0, j));
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let vx = self.value(x);
        assert!(start + width <= vx.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(vx.rows(), width);
        for i in 0..vx.rows() {
            value.row_mut(i).copy_from_slice(&vx.row(i)[start..start + width]);
        }
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let vx = self.value(x);
        assert!(start + count <= vx.rows(), "slice_rows out of range");
        let c = vx.cols();
        let value = Matrix::from_vec(count, c, vx.data()[start * c..(start + count) * c].to_vec());
        let rg = self.rg(x);
        self.push(value, Op::SliceRows(x, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + vp.cols()].copy_from_slice(vp.row(i));
            }
            off += vp.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).select_rows(idx);
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), rows * cols, "reshape size mismatch");
        let value = Matrix::from_vec(rows, cols, vx.data().to_vec());
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// 3×3 patch extraction with zero padding 1. `x` holds one pixel per row
    /// (row-major over a `height×width` grid) and one channel per column; the
    /// output column for tap `(ky, kx)` and channel `c` is `(ky*3 + kx)*ch + c`.
    pub fn im2col3x3(&mut self, x: Var, height: usize, width: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rows(), height * width, "im2col pixel count mismatch");
        let ch = vx.cols();
        let mut value = Matrix::zeros(height * width, 9 * ch);
        for py in 0..height {
            for px in 0..width {
                let out_row = value.row_mut(py * width + px);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (py as isize + ky as isize - 1, px as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                            continue;
                        }
                        let src = vx.row(sy as usize * width + sx as usize);
                        let off = (ky * 3 + kx) * ch;
                        out_row[off..off + ch].copy_from_slice(src);
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::Im2Col { x, height, width }, rg)
    }

    /// Scales each row to unit Euclidean norm. Zero rows are left at zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut value = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let n = vx.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                for v in value.row_mut(i) {
                    *v /= n;
                }
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    /// Weighted mean cross-entropy of row-wise softmax(logits) against class
    /// indices: `Σ wᵢ·(−log pᵢ[tᵢ]) / Σ wᵢ`. Zero total weight gives zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), targets.len(), "cross_entropy target count");
        assert_eq!(vl.rows(), weights.len(), "cross_entropy weight count");
        let probs = softmax_rows(vl);
        let total_w: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if total_w > 0.0 {
            for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                loss += w * -log_softmax_at(vl.row(i), t);
            }
            loss /= total_w;
        }
        let rg = self.rg(logits);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            rg,
        )
    }

    /// Mean over rows of `1 − (2·Σ p·g + s) / (Σ p + Σ g + s)`.
    pub fn soft_dice(&mut self, pred: Var, target: &Matrix, smooth: f64) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "soft_dice shape mismatch");
        let loss = soft_dice_value(vp, target, smooth);
        let rg = self.rg(pred);
        self.push(Matrix::filled(1, 1, loss), Op::SoftDice { pred, target: target.clone(), smooth }, rg)
    }

    /// Mean binary cross-entropy over all entries, probabilities clipped to
    /// `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce(&mut self, pred: Var, target: &Matrix) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "bce shape mismatch");
        let loss = bce_value(vp, target);
        let rg = self.rg(pred);
        self.push(Matrix::filled(1, 1, loss), Op::Bce { pred, target: target.clone() }, rg)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        if self.rg(root) {
            let (r, c) = self.value(root).shape();
            grads[root.0] = Some(Matrix::filled(r, c, 1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scaled(-1.0));
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (a, b) in s.row_mut(0).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    self.acc(grads, *row, s);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b);
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Matrix::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.scaled(*s)),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gamma);
                if self.rg(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    self.acc(grads, *gamma, dg);
                }
                if self.rg(*beta) {
                    let mut db = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            db.data_mut()[j] += g.get(i, j);
                        }
                    }
                    self.acc(grads, *beta, db);
                }
                if self.rg(*x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|j| g.get(i, j) * gv.get(0, j)).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().enumerate().map(|(j, d)| d * xhat.get(i, j)).sum();
                        for j in 0..cols {
                            let v = inv_std[i] / n * (n * dxhat[j] - sum_d - xhat.get(i, j) * sum_dx);
                            dx.set(i, j, v);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = vx.data().iter().zip(g.data()).map(|(&v, &gg)| gg * gelu_grad(v)).collect();
                self.acc(grads, *x, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = vx.data().iter().zip(g.data()).map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 }).collect();
                self.acc(grads, *x, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| if v >= *lo && v <= *hi { gg } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::SliceCols(x, start) => {
                let vx = self.value(*x);
                let mut d = Matrix::zeros(vx.rows(), vx.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.acc(grads, *x, d);
            }
            Op::SliceRows(x, start) => {
                let vx = self.value(*x);
                let mut d = Matrix::zeros(vx.rows(), vx.cols());
                let c = vx.cols();
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let c = g.cols();
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let d = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        self.acc(grads, p, d);
                    }
                    off += r;
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = self.value(*x);
                let mut d = Matrix::zeros(vx.rows(), vx.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (a, b) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, Matrix::from_vec(r, c, g.data().to_vec()));
            }
            Op::Im2Col { x, height, width } => {
                let vx = self.value(*x);
                let ch = vx.cols();
                let mut d = Matrix::zeros(vx.rows(), ch);
                for py in 0..*height {
                    for px in 0..*width {
                        let grow = g.row(py * width + px);
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (py as isize + ky as isize - 1, px as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= *height as isize || sx >= *width as isize {
                                    continue;
                                }
                                let off = (ky * 3 + kx) * ch;
                                let dst = d.row_mut(sy as usize * width + sx as usize);
                                for c in 0..ch {
                                    dst[c] += grow[off + c];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let total_w: f64 = weights.iter().sum();
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                if total_w > 0.0 {
                    let s = g.get(0, 0) / total_w;
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *out = s * w * (probs.get(i, j) - onehot);
                        }
                    }
                }
                self.acc(grads, *logits, d);
            }
            Op::SoftDice { pred, target, smooth } => {
                let vp = self.value(*pred);
                let rows = vp.rows();
                let mut d = Matrix::zeros(rows, vp.cols());
                if rows > 0 {
                    let s = g.get(0, 0) / rows as f64;
                    for i in 0..rows {
                        let (p, t) = (vp.row(i), target.row(i));
                        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
                        let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + smooth;
                        let num = 2.0 * inter + smooth;
                        for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                            *out = -s * (2.0 * t[j] * denom - num) / (denom * denom);
                        }
                    }
                }
                self.acc(grads, *pred, d);
            }
            Op::Bce { pred, target } => {
                let vp = self.value(*pred);
                let n = vp.len();
                let mut d = Matrix::zeros(vp.rows(), vp.cols());
                if n > 0 {
                    let s = g.get(0, 0) / n as f64;
                    for ((out, &p), &t) in d.data_mut().iter_mut().zip(vp.data()).zip(target.data()) {
                        if p > BCE_EPS && p < 1.0 - BCE_EPS {
                            *out = s * (-t / p + (1.0 - t) / (1.0 - p));
                        }
                    }
                }
                self.acc(grads, *pred, d);
            }
        }
    }
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every named parameter that received one.
    pub fn param_grads(&self) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}

pub(crate) fn soft_dice_value(p: &Matrix, t: &Matrix, smooth: f64) -> f64 {
    if p.rows() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..p.rows() {
        let (pr, tr) = (p.row(i), t.row(i));
        let inter: f64 = pr.iter().zip(tr).map(|(a, b)| a * b).sum();
        let denom = pr.iter().sum::<f64>() + tr.iter().sum::<f64>() + smooth;
        total += 1.0 - (2.0 * inter + smooth) / denom;
    }
    total / p.rows() as f64
}

pub(crate) fn bce_value(p: &Matrix, t: &Matrix) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let s: f64 = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    s / p.len() as f64
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
