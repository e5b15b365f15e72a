//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation in execution order. Parameters enter
//! the tape once per graph through [`Graph::param`], so a parameter reached by
//! two modules accumulates both contributions into a single gradient.

use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom, DeformGeom, FocalParams};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{gemm_into, matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` broadcast over rows and/or columns of `a`.
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    /// Softmax over consecutive column groups of the given width.
    SoftmaxGroups(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, rstd: Vec<T> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    MeanRows(Var),
    SumAll(Var),
    Im2Col { a: Var, geom: ConvGeom },
    Deform { value: Var, loc: Var, attn: Var, geom: Arc<DeformGeom> },
    Focal { logits: Var, grad: Matrix<T> },
    Giou { pred: Var, grad: Matrix<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.param_vars.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Parameter gradients in id order.
    pub fn params(&self) -> Vec<(ParamId, &Matrix<T>)> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn bcast_index(r: usize, c: usize, b: &Matrix<impl Real>) -> usize {
    let br = if b.rows == 1 { 0 } else { r };
    let bc = if b.cols == 1 { 0 } else { c };
    br * b.cols + bc
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, &[])
    }

    /// Leaf input whose gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.push(value, Op::Param, &[]);
        self.param_vars.insert(id, v);
        v
    }

    /// The tape variable of a parameter, if it has been loaded.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b), false);
        self.push(out, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b), true);
        self.push(out, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect())
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Matrix<T> {
        let x = self.value(a);
        Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|&p| f(p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    fn check_bcast(&self, a: Var, b: Var) {
        let (x, y) = (self.value(a), self.value(b));
        assert!(
            (y.rows == 1 || y.rows == x.rows) && (y.cols == 1 || y.cols == x.cols),
            "cannot broadcast {:?} onto {:?}",
            y.shape(),
            x.shape()
        );
    }

    /// `a + b` with `b` of shape `1 x n`, `m x 1` or `1 x 1`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        self.check_bcast(a, b);
        let (x, y) = (self.value(a), self.value(b));
        let mut out = x.clone();
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.data[r * x.cols + c] += y.data[bcast_index(r, c, y)];
            }
        }
        self.push(out, Op::AddBcast(a, b), &[a, b])
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        self.check_bcast(a, b);
        let (x, y) = (self.value(a), self.value(b));
        let mut out = x.clone();
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.data[r * x.cols + c] *= y.data[bcast_index(r, c, y)];
            }
        }
        self.push(out, Op::MulBcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.map(a, |p| p * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |p| if p > T::zero() { p } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |p| T::of(kernels::sigmoid(p.f64())));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, |p| p.abs());
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let cols = self.value(a).cols;
        self.softmax_groups(a, cols)
    }

    /// Softmax over each run of `group` consecutive columns.
    pub fn softmax_groups(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert!(group > 0 && x.cols % group == 0, "softmax group must divide columns");
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(group) {
            let m = chunk.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in chunk.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in chunk.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxGroups(a, group), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let n = T::of(cols as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(EPS)).sqrt();
            rstd.push(rs);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols));
        assert_eq!(b.shape(), (1, cols));
        let mut out = xhat.clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data[r * cols + c] = xhat.data[r * cols + c] * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows);
        let out = Matrix::from_vec(len, v.cols, v.data[start * v.cols..(start + len) * v.cols].to_vec());
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols);
        let mut out = Matrix::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, &[a])
    }

    /// `1 x n` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert!(v.rows > 0, "mean over zero rows");
        let mut out = Matrix::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, &x) in out.data.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let n = T::of(v.rows as f64);
        out.data.iter_mut().for_each(|o| *o /= n);
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum::<T>();
        self.push(Matrix::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let out = kernels::im2col_forward(&geom, self.value(a));
        self.push(out, Op::Im2Col { a, geom }, &[a])
    }

    pub fn deform_sample(&mut self, value: Var, loc: Var, attn: Var, geom: Arc<DeformGeom>) -> Var {
        let out = kernels::deform_sample_forward(&geom, self.value(value), self.value(loc), self.value(attn));
        self.push(out, Op::Deform { value, loc, attn, geom }, &[value, loc, attn])
    }

    /// Summed sigmoid focal loss against constant targets (`1 x 1`).
    pub fn focal_loss(&mut self, logits: Var, targets: &Matrix<T>, fp: FocalParams) -> Var {
        let (total, grad) = kernels::focal_forward_backward(self.value(logits), targets, fp);
        self.push(Matrix::scalar(T::of(total)), Op::Focal { logits, grad }, &[logits])
    }

    /// Summed `1 - GIoU` of `cxcywh` rows against constant targets (`1 x 1`).
    pub fn giou_loss(&mut self, pred: Var, targets: &Matrix<T>) -> Var {
        let (total, grad) = kernels::giou_loss_forward_backward(self.value(pred), targets);
        self.push(Matrix::scalar(T::of(total)), Op::Giou { pred, grad }, &[pred])
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn accum(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    gemm_into(g, false, bv, !trans_b, &mut ga, T::zero());
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    if *trans_b {
                        gemm_into(g, true, av, false, &mut gb, T::zero());
                    } else {
                        gemm_into(av, true, g, false, &mut gb, T::zero());
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.wants(*b) {
                    let mut gb = g.clone();
                    gb.data.iter_mut().for_each(|v| *v = -*v);
                    self.accum(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Matrix::from_vec(g.rows, g.cols, d));
                }
                if self.wants(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Matrix::from_vec(g.rows, g.cols, d));
                }
            }
            Op::AddBcast(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.wants(*b) {
                    let bv = self.value(*b);
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[bcast_index(r, c, bv)] += g.data[r * g.cols + c];
                        }
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::MulBcast(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] *= bv.data[bcast_index(r, c, bv)];
                        }
                    }
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let k = r * g.cols + c;
                            gb.data[bcast_index(r, c, bv)] += g.data[k] * av.data[k];
                        }
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let d = g.data.iter().map(|&x| x * *s).collect();
                self.accum(grads, *a, Matrix::from_vec(g.rows, g.cols, d));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                    .collect();
                self.accum(grads, *a, Matrix::from_vec(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(&x, &s)| x * s * (T::one() - s))
                    .collect();
                self.accum(grads, *a, Matrix::from_vec(g.rows, g.cols, d));
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(&x, &y)| {
                        if y > T::zero() {
                            x
                        } else if y < T::zero() {
                            -x
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accum(grads, *a, Matrix::from_vec(g.rows, g.cols, d));
            }
            Op::SoftmaxGroups(a, group) => {
                let y = &node.value;
                let mut d = Matrix::zeros(g.rows, g.cols);
                for ((dc, gc), yc) in d
                    .data
                    .chunks_mut(*group)
                    .zip(g.data.chunks(*group))
                    .zip(y.data.chunks(*group))
                {
                    let dot: T = gc.iter().zip(yc).map(|(&p, &q)| p * q).sum();
                    for k in 0..*group {
                        dc[k] = yc[k] * (gc[k] - dot);
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if self.wants(*gamma) {
                    let mut gg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += g.data[r * cols + c] * xhat.data[r * cols + c];
                        }
                    }
                    self.accum(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb.data[c] += g.data[r * cols + c];
                        }
                    }
                    self.accum(grads, *beta, gb);
                }
                if self.wants(*x) {
                    let n = T::of(cols as f64);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let d = g.data[r * cols + c] * gv.data[c];
                            sum_d += d;
                            sum_dx += d * xhat.data[r * cols + c];
                        }
                        for c in 0..cols {
                            let d = g.data[r * cols + c] * gv.data[c];
                            gx.data[r * cols + c] =
                                rstd[r] * (d - sum_d / n - xhat.data[r * cols + c] * sum_dx / n);
                        }
                    }
                    self.accum(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.wants(p) {
                        let d = g.data[off * c..(off + r) * c].to_vec();
                        self.accum(grads, p, Matrix::from_vec(r, c, d));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.wants(p) {
                        let mut d = Matrix::zeros(r, c);
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accum(grads, p, d);
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                d.data[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                self.accum(grads, *a, d);
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                self.accum(grads, *a, d);
            }
            Op::GatherRows { a, idx } => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (o, &i) in idx.iter().enumerate() {
                    for (x, &y) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *x += y;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let n = T::of(r as f64);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for (x, &y) in d.row_mut(i).iter_mut().zip(&g.data) {
                        *x = y / n;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accum(grads, *a, Matrix::filled(r, c, g.data[0]));
            }
            Op::Im2Col { a, geom } => {
                let d = kernels::im2col_backward(geom, g);
                self.accum(grads, *a, d);
            }
            Op::Deform { value, loc, attn, geom } => {
                let d = kernels::deform_sample_backward(geom, self.value(*value), self.value(*loc), self.value(*attn), g);
                self.accum(grads, *value, d.value);
                self.accum(grads, *loc, d.loc);
                self.accum(grads, *attn, d.attn);
            }
            Op::Focal { logits, grad } => {
                let s = g.data[0];
                let d = grad.data.iter().map(|&x| x * s).collect();
                self.accum(grads, *logits, Matrix::from_vec(grad.rows, grad.cols, d));
            }
            Op::Giou { pred, grad } => {
                let s = g.data[0];
                let d = grad.data.iter().map(|&x| x * s).collect();
                self.accum(grads, *pred, Matrix::from_vec(grad.rows, grad.cols, d));
            }
        }
    }
}
