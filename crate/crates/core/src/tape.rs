//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products. Leaves are either constants ([`Tape::constant`])
//! or differentiable inputs ([`Tape::param`]); nodes that depend on no
//! parameter are skipped during the backward sweep.
//!
//! The op set is small and tailored to the model: dense algebra, pointwise
//! activations, row gather/scatter for sparse graphs, a segment-wise masked
//! softmax, row-wise Poincaré-ball kernels and the two multi-label losses.

use std::rc::Rc;

use crate::geometry;
use crate::matrix::{matmul_acc, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
    Sum(Var),
    ExpProject(Var),
    MobiusAdd(Var, Var),
    LogOrigin(Var),
    PoincareDist(Var, Var),
    SegmentSoftmax {
        scores: Var,
        gates: Var,
        offsets: Rc<[usize]>,
        tau: f64,
    },
    Bce {
        probs: Var,
        targets: Rc<Mat>,
        eps: f64,
    },
    Margin {
        probs: Var,
        targets: Rc<Mat>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push_op(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a @ bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push_op(v, Op::MatMulBt(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "elementwise shape mismatch");
        let data = ma.data().iter().zip(mb.data()).map(|(&x, &y)| f(x, y)).collect();
        Mat::from_vec(ma.rows(), ma.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows(), 1, "add_row expects a single row");
        assert_eq!(ma.cols(), mr.cols(), "add_row width mismatch");
        let mut v = ma.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(mr.data()) {
                *x += b;
            }
        }
        self.push_op(v, Op::AddRow(a, row), &[a, row])
    }

    /// Scales row r of an r×c matrix by entry r of an r×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ma, mc) = (self.value(a), self.value(col));
        assert_eq!(mc.cols(), 1, "mul_col expects a column");
        assert_eq!(ma.rows(), mc.rows(), "mul_col height mismatch");
        let mut v = ma.clone();
        for r in 0..v.rows() {
            let s = mc.data()[r];
            v.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push_op(v, Op::MulCol(a, col), &[a, col])
    }

    /// `k·a + c`
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let v = self.value(a).map(|x| k * x + c);
        self.push_op(v, Op::Affine(a, k), &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    /// Exponential-linear unit with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push_op(v, Op::Elu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push_op(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push_op(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push_op(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let cols = m.cols();
        let v = Mat::from_vec(len, cols, m.data()[start * cols..(start + len) * cols].to_vec());
        self.push_op(v, Op::SliceRows(a, start), &[a])
    }

    /// Output row k is input row `idx[k]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let m = self.value(a);
        let cols = m.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(m.row(i));
        }
        let v = Mat::from_vec(idx.len(), cols, data);
        self.push_op(v, Op::GatherRows(a, idx), &[a])
    }

    /// Output row `idx[k]` accumulates input row k; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), idx.len(), "scatter index length mismatch");
        let mut v = Mat::zeros(rows, m.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, x) in v.row_mut(i).iter_mut().zip(m.row(k)) {
                *o += x;
            }
        }
        self.push_op(v, Op::ScatterRows(a, idx), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Mat::scalar(s), Op::Sum(a), &[a])
    }

    fn rowwise(&self, a: Var, f: impl Fn(&[f64], &mut [f64])) -> Mat {
        let m = self.value(a);
        let mut v = Mat::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            f(m.row(r), v.row_mut(r));
        }
        v
    }

    /// Row-wise projection into the Poincaré ball.
    pub fn exp_project(&mut self, a: Var) -> Var {
        let v = self.rowwise(a, geometry::exp_project_raw);
        self.push_op(v, Op::ExpProject(a), &[a])
    }

    /// Row-wise Möbius addition (with boundary re-projection).
    pub fn mobius_add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "mobius_add shape mismatch");
        let mut v = Mat::zeros(ma.rows(), ma.cols());
        for r in 0..ma.rows() {
            geometry::mobius_add_projected_raw(ma.row(r), mb.row(r), v.row_mut(r));
        }
        self.push_op(v, Op::MobiusAdd(a, b), &[a, b])
    }

    /// Row-wise log map at the origin.
    pub fn log_origin(&mut self, a: Var) -> Var {
        let v = self.rowwise(a, geometry::log_origin_raw);
        self.push_op(v, Op::LogOrigin(a), &[a])
    }

    /// Row-wise Poincaré distance; returns an r×1 column.
    pub fn poincare_distance(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "distance shape mismatch");
        let data = (0..ma.rows())
            .map(|r| geometry::distance_raw(ma.row(r), mb.row(r)))
            .collect();
        let v = Mat::column(data);
        self.push_op(v, Op::PoincareDist(a, b), &[a, b])
    }

    /// Gated softmax within contiguous segments of an E×1 score column.
    ///
    /// For segment i spanning `offsets[i]..offsets[i+1]`:
    /// `α_e = exp(s_e/τ)·z_e / Σ_k exp(s_k/τ)·z_k`. Returns `None` if a
    /// segment has no open gate.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        gates: Var,
        offsets: Rc<[usize]>,
        tau: f64,
    ) -> Option<Var> {
        let (s, z) = (self.value(scores), self.value(gates));
        assert_eq!(s.cols(), 1);
        assert_eq!(s.shape(), z.shape(), "scores/gates shape mismatch");
        let mut alpha = vec![0.0; s.rows()];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let (shift, total) = segment_normalizer(&s.data()[lo..hi], &z.data()[lo..hi], tau)?;
            for e in lo..hi {
                alpha[e] = gated_term(s.data()[e], z.data()[e], tau, shift) / total;
            }
        }
        let v = Mat::column(alpha);
        Some(self.push_op(
            v,
            Op::SegmentSoftmax {
                scores,
                gates,
                offsets,
                tau,
            },
            &[scores, gates],
        ))
    }

    /// Summed binary cross-entropy over all entries, probabilities clamped to `[eps, 1−eps]`.
    pub fn bce(&mut self, probs: Var, targets: Rc<Mat>, eps: f64) -> Var {
        let p = self.value(probs);
        assert_eq!(p.shape(), targets.shape(), "bce shape mismatch");
        let total: f64 = p
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&q, &m)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(m * q.ln() + (1.0 - m) * (1.0 - q).ln())
            })
            .sum();
        self.push_op(Mat::scalar(total), Op::Bce { probs, targets, eps }, &[probs])
    }

    /// Multi-label hinge: per row, `Σ_{pos i, neg j} max(0, 1 − (p_i − p_j)) / cols`, summed over rows.
    pub fn margin(&mut self, probs: Var, targets: Rc<Mat>) -> Var {
        let p = self.value(probs);
        assert_eq!(p.shape(), targets.shape(), "margin shape mismatch");
        let mut total = 0.0;
        let width = p.cols() as f64;
        for r in 0..p.rows() {
            let (pr, tr) = (p.row(r), targets.row(r));
            for i in 0..pr.len() {
                if tr[i] != 1.0 {
                    continue;
                }
                for j in 0..pr.len() {
                    if tr[j] == 0.0 {
                        total += (1.0 - (pr[i] - pr[j])).max(0.0) / width;
                    }
                }
            }
        }
        self.push_op(Mat::scalar(total), Op::Margin { probs, targets }, &[probs])
    }

    /// Reverse sweep from a 1×1 root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Mat::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.needs(a) {
                    let ga = g.matmul_bt(self.value(b));
                    self.acc(grads, a, |m| m.add_assign(&ga));
                }
                if self.needs(b) {
                    let va = self.value(a);
                    self.acc(grads, b, |m| {
                        let t = va.matmul_at(g);
                        m.add_assign(&t)
                    });
                }
            }
            &Op::MatMulBt(a, b) => {
                if self.needs(a) {
                    let vb = self.value(b);
                    self.acc(grads, a, |m| matmul_acc(g, vb, m));
                }
                if self.needs(b) {
                    let gb = g.matmul_at(self.value(a));
                    self.acc(grads, b, |m| m.add_assign(&gb));
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |m| m.add_assign(g));
                self.acc(grads, b, |m| m.add_assign(g));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |m| m.add_assign(g));
                self.acc(grads, b, |m| {
                    for (x, y) in m.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                self.acc(grads, a, |m| {
                    for ((x, gy), y) in m.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *x += gy * y;
                    }
                });
                self.acc(grads, b, |m| {
                    for ((x, gy), y) in m.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += gy * y;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                self.acc(grads, a, |m| m.add_assign(g));
                self.acc(grads, row, |m| {
                    for r in 0..g.rows() {
                        for (x, y) in m.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                });
            }
            &Op::MulCol(a, col) => {
                let (va, vc) = (self.value(a), self.value(col));
                self.acc(grads, a, |m| {
                    for r in 0..g.rows() {
                        let s = vc.data()[r];
                        for (x, y) in m.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += s * y;
                        }
                    }
                });
                self.acc(grads, col, |m| {
                    for r in 0..g.rows() {
                        m.data_mut()[r] += geometry::dot(g.row(r), va.row(r));
                    }
                });
            }
            &Op::Affine(a, k) => {
                self.acc(grads, a, |m| {
                    for (x, y) in m.data_mut().iter_mut().zip(g.data()) {
                        *x += k * y;
                    }
                });
            }
            &Op::Sigmoid(a) => self.acc(grads, a, |m| {
                for ((x, gy), y) in m.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x += gy * y * (1.0 - y);
                }
            }),
            &Op::Tanh(a) => self.acc(grads, a, |m| {
                for ((x, gy), y) in m.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x += gy * (1.0 - y * y);
                }
            }),
            &Op::Elu(a) => {
                let va = self.value(a);
                self.acc(grads, a, |m| {
                    for (((x, gy), y), xin) in m
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(out.data())
                        .zip(va.data())
                    {
                        *x += if *xin > 0.0 { *gy } else { gy * (y + 1.0) };
                    }
                })
            }
            &Op::LeakyRelu(a, slope) => {
                let va = self.value(a);
                self.acc(grads, a, |m| {
                    for ((x, gy), xin) in m.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += if *xin > 0.0 { *gy } else { slope * gy };
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |m| {
                        for r in 0..g.rows() {
                            for (x, y) in m.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *x += y;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |m| {
                        for (x, y) in m.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *x += y;
                        }
                    });
                    off += n;
                }
                debug_assert_eq!(off, g.rows() * cols);
            }
            &Op::SliceRows(a, start) => {
                let cols = g.cols();
                self.acc(grads, a, |m| {
                    let dst = &mut m.data_mut()[start * cols..start * cols + g.len()];
                    for (x, y) in dst.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                });
            }
            Op::GatherRows(a, idx) => self.acc(grads, *a, |m| {
                for (k, &i) in idx.iter().enumerate() {
                    for (x, y) in m.row_mut(i).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
            }),
            Op::ScatterRows(a, idx) => self.acc(grads, *a, |m| {
                for (k, &i) in idx.iter().enumerate() {
                    for (x, y) in m.row_mut(k).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
            }),
            &Op::Sum(a) => {
                let s = g.item();
                self.acc(grads, a, |m| m.data_mut().iter_mut().for_each(|x| *x += s));
            }
            &Op::ExpProject(a) => {
                let va = self.value(a);
                self.acc(grads, a, |m| {
                    for r in 0..va.rows() {
                        geometry::exp_project_vjp(va.row(r), g.row(r), m.row_mut(r));
                    }
                });
            }
            &Op::LogOrigin(a) => {
                let va = self.value(a);
                self.acc(grads, a, |m| {
                    for r in 0..va.rows() {
                        geometry::log_origin_vjp(va.row(r), g.row(r), m.row_mut(r));
                    }
                });
            }
            &Op::MobiusAdd(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let mut ga = Mat::zeros(va.rows(), va.cols());
                let mut gb = Mat::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    geometry::mobius_add_projected_vjp(
                        va.row(r),
                        vb.row(r),
                        g.row(r),
                        ga.row_mut(r),
                        gb.row_mut(r),
                    );
                }
                self.acc(grads, a, |m| m.add_assign(&ga));
                self.acc(grads, b, |m| m.add_assign(&gb));
            }
            &Op::PoincareDist(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let mut ga = Mat::zeros(va.rows(), va.cols());
                let mut gb = Mat::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    let gr = g.data()[r];
                    let (mut ta, mut tb) = (vec![0.0; va.cols()], vec![0.0; vb.cols()]);
                    geometry::distance_vjp(va.row(r), vb.row(r), gr, &mut ta, &mut tb);
                    ga.row_mut(r).copy_from_slice(&ta);
                    gb.row_mut(r).copy_from_slice(&tb);
                }
                self.acc(grads, a, |m| m.add_assign(&ga));
                self.acc(grads, b, |m| m.add_assign(&gb));
            }
            Op::SegmentSoftmax {
                scores,
                gates,
                offsets,
                tau,
            } => {
                let (s, z) = (self.value(*scores), self.value(*gates));
                let alpha = out.data();
                let mut gs = vec![0.0; alpha.len()];
                let mut gz = vec![0.0; alpha.len()];
                for w in offsets.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    let dotg: f64 = (lo..hi).map(|e| g.data()[e] * alpha[e]).sum();
                    let (shift, total) = segment_normalizer(&s.data()[lo..hi], &z.data()[lo..hi], *tau)
                        .expect("forward pass succeeded on the same inputs");
                    for e in lo..hi {
                        let centered = g.data()[e] - dotg;
                        gs[e] = alpha[e] * centered / tau;
                        // d alpha / d z_e, defined even where z_e = 0
                        let q = (s.data()[e] / tau - shift).exp() / total;
                        gz[e] = q * centered;
                    }
                }
                self.acc(grads, *scores, |m| {
                    m.data_mut().iter_mut().zip(&gs).for_each(|(x, y)| *x += y)
                });
                self.acc(grads, *gates, |m| {
                    m.data_mut().iter_mut().zip(&gz).for_each(|(x, y)| *x += y)
                });
            }
            Op::Bce {
                probs,
                targets,
                eps,
            } => {
                let p = self.value(*probs);
                let s = g.item();
                self.acc(grads, *probs, |m| {
                    for ((x, &q), &t) in m.data_mut().iter_mut().zip(p.data()).zip(targets.data()) {
                        if q > *eps && q < 1.0 - eps {
                            *x += s * (-t / q + (1.0 - t) / (1.0 - q));
                        }
                    }
                });
            }
            Op::Margin { probs, targets } => {
                let p = self.value(*probs);
                let s = g.item() / p.cols() as f64;
                self.acc(grads, *probs, |m| {
                    for r in 0..p.rows() {
                        let (pr, tr) = (p.row(r), targets.row(r));
                        let gr = m.row_mut(r);
                        for i in 0..pr.len() {
                            if tr[i] != 1.0 {
                                continue;
                            }
                            for j in 0..pr.len() {
                                if tr[j] == 0.0 && 1.0 - (pr[i] - pr[j]) > 0.0 {
                                    gr[i] -= s;
                                    gr[j] += s;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Log-space normalizer of one gated softmax segment: the largest
/// `s/τ + ln z` over open gates and the sum of `z·exp(s/τ − shift)`.
/// `None` when no gate is open.
fn segment_normalizer(s: &[f64], z: &[f64], tau: f64) -> Option<(f64, f64)> {
    let shift = s
        .iter()
        .zip(z)
        .filter(|(_, &g)| g > 0.0)
        .map(|(&x, &g)| x / tau + g.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return None;
    }
    let total = s.iter().zip(z).map(|(&x, &g)| gated_term(x, g, tau, shift)).sum();
    Some((shift, total))
}

fn gated_term(s: f64, z: f64, tau: f64, shift: f64) -> f64 {
    if z > 0.0 {
        (s / tau + z.ln() - shift).exp()
    } else {
        0.0
    }
}
