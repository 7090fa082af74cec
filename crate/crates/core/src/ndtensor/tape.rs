//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends one node holding its value and the ids of its
//! inputs, so node order is a topological order and [`Tape::backward`] is a
//! single reverse sweep. Tapes are rebuilt for every task; nothing is cached.
//!
//! All primitives view operands as matrices (see [`Tensor::dims2`]); "rows"
//! below always means the leading folded axis.

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Recip(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Tile { a: Var, times: usize },
    MeanTiles { a: Var, times: usize },
    Reshape(Var),
    RowNorms(Var),
    ScaleRows(Var, Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Var),
    SoftmaxCrossEntropy(Var, Var),
    SqDists(Var, Var),
    Outer(Var, Var),
    FrobNorm(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation. Single-owner; build one per task.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Result of a backward sweep: one optional adjoint per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Var>,
}

impl Gradients {
    /// Gradient for `v`; zeros of matching shape when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn params(&self) -> Vec<Tensor> {
        self.params.iter().map(|&p| self.wrt(p)).collect()
    }

    pub fn into_params(mut self) -> Vec<Tensor> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|p| match self.grads[p.0].take() {
                Some(g) => g,
                None => Tensor::zeros(&self.shapes[p.0]),
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn elementwise(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        let (_, c) = va.dims2();
        assert_eq!(vr.len(), c, "add_row: row length {} vs {c} columns", vr.len());
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (d, &r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Multiplies `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by: factor must hold one value");
        let k = self.value(s).item();
        self.unary(a, |x| x * k, Op::ScaleBy(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = va.dims2();
        let (br, bc) = vb.dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: inner dims {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::new(va.data(), ar, ac, ta),
            MatRef::new(vb.data(), br, bc, tb),
            &mut out,
            false,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (_, c) = va.dims2();
        let mut data = vec![0.0; va.len()];
        for (src, dst) in va.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, rows, "concat_cols: row counts differ");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (rows, c) = va.dims2();
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * c + start..r * c + start + len]);
        }
        self.push(Tensor::from_parts(vec![rows, len], data), Op::SliceCols { a, start })
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let va = self.value(a);
        let (rows, c) = va.dims2();
        let mut data = Vec::with_capacity(va.len() * times);
        for _ in 0..times {
            data.extend_from_slice(va.data());
        }
        self.push(Tensor::from_parts(vec![rows * times, c], data), Op::Tile { a, times })
    }

    /// Inverse pooling of [`Tape::tile`]: the mean of `times` vertical blocks.
    pub fn mean_tiles(&mut self, a: Var, times: usize) -> Var {
        let va = self.value(a);
        let (rows, c) = va.dims2();
        assert_eq!(rows % times, 0, "mean_tiles: {rows} rows not divisible by {times}");
        let block = rows / times * c;
        let mut data = vec![0.0; block];
        for chunk in va.data().chunks(block) {
            for (d, &s) in data.iter_mut().zip(chunk) {
                *d += s;
            }
        }
        let inv = 1.0 / times as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        self.push(Tensor::from_parts(vec![rows / times, c], data), Op::MeanTiles { a, times })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).reshape(shape).expect("reshape: element count changes");
        self.push(value, Op::Reshape(a))
    }

    /// Euclidean norm of each row, as a vector.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (_, c) = va.dims2();
        let data = va.data().chunks(c).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        self.push(Tensor::vector(data), Op::RowNorms(a))
    }

    /// Multiplies row `i` of `a` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let va = self.value(a);
        let vs = self.value(s);
        let (rows, c) = va.dims2();
        assert_eq!(vs.len(), rows, "scale_rows: need one factor per row");
        let mut data = va.data().to_vec();
        for (chunk, &k) in data.chunks_mut(c).zip(vs.data()) {
            chunk.iter_mut().for_each(|x| *x *= k);
        }
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, Op::ScaleRows(a, s))
    }

    /// Column sums, as a vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (_, c) = va.dims2();
        let mut data = vec![0.0; c];
        for chunk in va.data().chunks(c) {
            for (d, &x) in data.iter_mut().zip(chunk) {
                *d += x;
            }
        }
        self.push(Tensor::vector(data), Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum() / va.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (vp, vt) = (self.value(pred), self.value(target));
        same_shape(vp, vt, "mse");
        let n = vp.len() as f64;
        let s = vp.data().iter().zip(vt.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mse(pred, target))
    }

    /// `-mean_rows Σ_j y_j ln p_j` for probability rows `p` and one-hot rows `y`.
    pub fn cross_entropy(&mut self, p: Var, y: Var) -> Var {
        let (vp, vy) = (self.value(p), self.value(y));
        same_shape(vp, vy, "cross_entropy");
        let rows = vp.rows() as f64;
        let s = -vp
            .data()
            .iter()
            .zip(vy.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&q, &t)| t * q.ln())
            .sum::<f64>()
            / rows;
        self.push(Tensor::scalar(s), Op::CrossEntropy(p, y))
    }

    /// Cross-entropy of `softmax(logits)` against one-hot rows, computed stably.
    pub fn softmax_cross_entropy(&mut self, logits: Var, y: Var) -> Var {
        let (vl, vy) = (self.value(logits), self.value(y));
        same_shape(vl, vy, "softmax_cross_entropy");
        let (rows, c) = vl.dims2();
        let mut total = 0.0;
        for (l, t) in vl.data().chunks(c).zip(vy.data().chunks(c)) {
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += l.iter().zip(t).map(|(&x, &ti)| ti * (lse - x)).sum::<f64>();
        }
        self.push(Tensor::scalar(total / rows as f64), Op::SoftmaxCrossEntropy(logits, y))
    }

    /// Squared Euclidean distances between the rows of `e` (q×d) and `c` (n×d).
    pub fn sq_dists(&mut self, e: Var, c: Var) -> Var {
        let (ve, vc) = (self.value(e), self.value(c));
        let (q, d) = ve.dims2();
        let (n, d2) = vc.dims2();
        assert_eq!(d, d2, "sq_dists: embedding widths differ");
        let mut data = Vec::with_capacity(q * n);
        for i in 0..q {
            let ei = ve.row(i);
            for j in 0..n {
                data.push(ei.iter().zip(vc.row(j)).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        self.push(Tensor::from_parts(vec![q, n], data), Op::SqDists(e, c))
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Var {
        let value = super::tensor::outer(self.value(u), self.value(v)).expect("outer: empty operand");
        self.push(value, Op::Outer(u, v))
    }

    pub fn frobenius_norm(&mut self, m: Var) -> Var {
        let n = self.value(m).norm();
        self.push(Tensor::scalar(n), Op::FrobNorm(m))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.data(), self);
                accumulate(grads, *b, g.data(), self);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.data(), self);
                let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                accumulate(grads, *b, &neg, self);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.data(), self);
                let c = self.value(*a).cols();
                let mut gr = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    for (d, &x) in gr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                accumulate(grads, *row, &gr, self);
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.data(), self),
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.data().iter().map(|x| x * c).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                let ga: Vec<f64> = g.data().iter().map(|x| x * k).collect();
                accumulate(grads, *a, &ga, self);
                let gs = g.dot(self.value(*a));
                accumulate(grads, *s, &[gs], self);
            }
            Op::MatMul { a, b, ta, tb } => self.matmul_backward(*a, *b, *ta, *tb, g, grads),
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.data().iter().zip(out.data()).map(|(x, s)| x * s * (1.0 - s)).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.data().iter().zip(out.data()).map(|(x, t)| x * (1.0 - t * t)).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(x, &z)| if z > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::Recip(a) => {
                let ga: Vec<f64> = g.data().iter().zip(out.data()).map(|(x, r)| -x * r * r).collect();
                accumulate(grads, *a, &ga, self);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; out.len()];
                for ((p, gr), dst) in out.data().chunks(c).zip(g.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let inner: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &pi), &gi) in dst.iter_mut().zip(p).zip(gr) {
                        *d = pi * (gi - inner);
                    }
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, &gp, self);
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, c) = self.value(*a).dims2();
                let len = out.cols();
                let mut ga = vec![0.0; rows * c];
                for r in 0..rows {
                    ga[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::Tile { a, times } => {
                let n = self.value(*a).len();
                let mut ga = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (d, &x) in ga.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                debug_assert_eq!(g.len(), n * times);
                accumulate(grads, *a, &ga, self);
            }
            Op::MeanTiles { a, times } => {
                let inv = 1.0 / *times as f64;
                let mut ga = Vec::with_capacity(g.len() * times);
                for _ in 0..*times {
                    ga.extend(g.data().iter().map(|x| x * inv));
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::Reshape(a) => accumulate(grads, *a, g.data(), self),
            Op::RowNorms(a) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = vec![0.0; va.len()];
                for (((src, dst), &n), &gi) in va.data().chunks(c).zip(ga.chunks_mut(c)).zip(out.data()).zip(g.data()) {
                    if n > 0.0 {
                        for (d, &x) in dst.iter_mut().zip(src) {
                            *d = gi * x / n;
                        }
                    }
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::ScaleRows(a, s) => {
                let (va, vs) = (self.value(*a), self.value(*s));
                let c = va.cols();
                let mut ga = vec![0.0; va.len()];
                let mut gs = vec![0.0; vs.len()];
                for (i, ((gr, ar), dst)) in g.data().chunks(c).zip(va.data().chunks(c)).zip(ga.chunks_mut(c)).enumerate() {
                    let k = vs.data()[i];
                    let mut acc = 0.0;
                    for ((d, &gi), &ai) in dst.iter_mut().zip(gr).zip(ar) {
                        *d = gi * k;
                        acc += gi * ai;
                    }
                    gs[i] = acc;
                }
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *s, &gs, self);
            }
            Op::SumRows(a) => {
                let rows = self.value(*a).rows();
                let mut ga = Vec::with_capacity(rows * g.len());
                for _ in 0..rows {
                    ga.extend_from_slice(g.data());
                }
                accumulate(grads, *a, &ga, self);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![g.item(); n], self);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![g.item() / n as f64; n], self);
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (self.value(*p), self.value(*t));
                let k = 2.0 * g.item() / vp.len() as f64;
                let gp: Vec<f64> = vp.data().iter().zip(vt.data()).map(|(a, b)| k * (a - b)).collect();
                let gt: Vec<f64> = gp.iter().map(|x| -x).collect();
                accumulate(grads, *p, &gp, self);
                accumulate(grads, *t, &gt, self);
            }
            Op::CrossEntropy(p, y) => {
                let (vp, vy) = (self.value(*p), self.value(*y));
                let k = g.item() / vp.rows() as f64;
                let gp: Vec<f64> = vp
                    .data()
                    .iter()
                    .zip(vy.data())
                    .map(|(&q, &t)| if t != 0.0 { -k * t / q } else { 0.0 })
                    .collect();
                let gy: Vec<f64> = vp.data().iter().map(|&q| -k * q.ln()).collect();
                accumulate(grads, *p, &gp, self);
                accumulate(grads, *y, &gy, self);
            }
            Op::SoftmaxCrossEntropy(l, y) => {
                let (vl, vy) = (self.value(*l), self.value(*y));
                let (rows, c) = vl.dims2();
                let k = g.item() / rows as f64;
                let mut gl = vec![0.0; vl.len()];
                let mut gy = vec![0.0; vl.len()];
                for (((lr, yr), gd), gyd) in vl.data().chunks(c).zip(vy.data().chunks(c)).zip(gl.chunks_mut(c)).zip(gy.chunks_mut(c)) {
                    let mut p = vec![0.0; c];
                    softmax_row(lr, &mut p);
                    let ysum: f64 = yr.iter().sum();
                    let max = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + lr.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    for j in 0..c {
                        gd[j] = k * (ysum * p[j] - yr[j]);
                        gyd[j] = k * (lse - lr[j]);
                    }
                }
                accumulate(grads, *l, &gl, self);
                accumulate(grads, *y, &gy, self);
            }
            Op::SqDists(e, c) => {
                let (ve, vc) = (self.value(*e), self.value(*c));
                let (q, d) = ve.dims2();
                let n = vc.rows();
                let mut ge = vec![0.0; q * d];
                let mut gc = vec![0.0; n * d];
                for i in 0..q {
                    for j in 0..n {
                        let gij = 2.0 * g.data()[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = ve.data()[i * d + k] - vc.data()[j * d + k];
                            ge[i * d + k] += gij * diff;
                            gc[j * d + k] -= gij * diff;
                        }
                    }
                }
                accumulate(grads, *e, &ge, self);
                accumulate(grads, *c, &gc, self);
            }
            Op::Outer(u, v) => {
                let (vu, vv) = (self.value(*u), self.value(*v));
                let (m, n) = (vu.len(), vv.len());
                let mut gu = vec![0.0; m];
                let mut gv = vec![0.0; n];
                for i in 0..m {
                    let row = &g.data()[i * n..(i + 1) * n];
                    gu[i] = row.iter().zip(vv.data()).map(|(a, b)| a * b).sum();
                    for (d, &x) in gv.iter_mut().zip(row) {
                        *d += x * vu.data()[i];
                    }
                }
                accumulate(grads, *u, &gu, self);
                accumulate(grads, *v, &gv, self);
            }
            Op::FrobNorm(m) => {
                // Subgradient 0 at the zero matrix.
                let n = out.item();
                if n > 0.0 {
                    let k = g.item() / n;
                    let gm: Vec<f64> = self.value(*m).data().iter().map(|x| k * x).collect();
                    accumulate(grads, *m, &gm, self);
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = va.dims2();
        let (br, bc) = vb.dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        let gview = |trans| MatRef::new(g.data(), m, n, trans);

        let ga_slot = slot(grads, a, va.shape());
        if ta {
            // dA (k×m) = op(B) · dCᵀ
            gemm(k, n, m, MatRef::new(vb.data(), br, bc, tb), gview(true), ga_slot, true);
        } else {
            // dA (m×k) = dC · op(B)ᵀ
            gemm(m, n, k, gview(false), MatRef::new(vb.data(), br, bc, !tb), ga_slot, true);
        }
        let gb_slot = slot(grads, b, vb.shape());
        if tb {
            // dB (n×k) = dCᵀ · op(A)
            gemm(n, m, k, gview(true), MatRef::new(va.data(), ar, ac, ta), gb_slot, true);
        } else {
            // dB (k×n) = op(A)ᵀ · dC
            gemm(k, m, n, MatRef::new(va.data(), ar, ac, !ta), gview(false), gb_slot, true);
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &[f64], tape: &Tape) {
    match &mut grads[v.0] {
        Some(t) => {
            for (d, &x) in t.data_mut().iter_mut().zip(g) {
                *d += x;
            }
        }
        none => {
            *none = Some(Tensor::from_parts(tape.value(v).shape().to_vec(), g.to_vec()));
        }
    }
}
