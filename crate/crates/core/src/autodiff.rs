//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] with seed gradients for any set of output nodes walks the
//! record in reverse and returns a [`Gradients`] table. Seeding arbitrary nodes
//! (not just a scalar loss) lets a forward pass be split across several tapes
//! and the gradient be carried from one to the next.

use std::collections::HashMap;

use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    ClampMin(Var, T),
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax(Var),
    NormalizeRows { x: Var, norms: Vec<T> },
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    LogSumExp(Var),
    BceWithLogits(Var, Vec<T>),
    RowMix { table: Var, mix: Vec<Vec<(usize, T)>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a trainable parameter, once per tape.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.var(value.clone());
        self.params.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(m, n);
        gemm_nn(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dimensions differ");
        let mut out = Tensor::zeros(m, n);
        gemm_nt(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shapes differ");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.rows(), va.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.rows(), va.cols(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1 x n row");
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, &x) in out.row_mut(i).iter_mut().zip(&r) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row expects a 1 x n row");
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, &x) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= x;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.map(a, |x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, T::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.map(a, T::ln);
        let ng = self.ng(a);
        self.push(out, Op::Ln(a), ng)
    }

    /// `max(a, floor)`; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let out = self.map(a, |x| if x < floor { floor } else { x });
        let ng = self.ng(a);
        self.push(out, Op::ClampMin(a, floor), ng)
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (m, n) = self.shape(x);
        let nf = T::from_usize(n).unwrap();
        let mut out = self.value(x).clone();
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = out.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    /// Row-wise softmax. Columns flagged in `masked_cols` get probability 0.
    pub fn softmax(&mut self, a: Var, masked_cols: Option<&[bool]>) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = out.row_mut(i);
            let keep = |j: usize| masked_cols.map_or(true, |mk| !mk[j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            let mut total = T::zero();
            for (j, v) in row.iter_mut().enumerate() {
                if keep(j) {
                    *v = (*v - mx).exp();
                    total += *v;
                } else {
                    *v = T::zero();
                }
            }
            if total > T::zero() {
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        debug_assert_eq!(out.cols(), n);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Scales each row to unit L2 norm; an all-zero row maps to zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (m, _) = self.shape(x);
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = out.row_mut(i);
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm > T::zero() {
                for v in row.iter_mut() {
                    *v /= nrm;
                }
            } else {
                log::debug!("zero-norm vector in cosine similarity; treating similarity as 0");
            }
            norms.push(nrm);
        }
        let ng = self.ng(x);
        self.push(out, Op::NormalizeRows { x, norms }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let out = Tensor::new(idx.len(), n, data);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather_rows(a, &[i])
    }

    /// Picks flat (row-major) entries into a `1 x k` row.
    pub fn gather(&mut self, a: Var, flat: &[usize]) -> Var {
        let va = self.value(a);
        let data = flat.iter().map(|&i| va.data()[i]).collect();
        let out = Tensor::row_vector(data);
        let ng = self.ng(a);
        self.push(out, Op::Gather(a, flat.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (m, _) = va.shape();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&va.row(i)[start..end]);
        }
        let out = Tensor::new(m, end - start, data);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), m, "concat_cols row counts differ");
                data.extend_from_slice(v.row(i));
            }
        }
        let out = Tensor::new(m, total, data);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), n, "concat_rows column counts differ");
            data.extend_from_slice(v.data());
            m += v.rows();
        }
        let out = Tensor::new(m, n, data);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum of `a` and `b` entries, reduced to a scalar: `sum(a * b)`.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Stabilized `ln sum exp` over all entries.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = logsumexp(self.value(a).data());
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::LogSumExp(a), ng)
    }

    /// `sum_j [max(z,0) - z y + ln(1 + e^{-|z|})]`, the numerically stable
    /// binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[T]) -> Var {
        let vz = self.value(z);
        assert_eq!(vz.len(), targets.len(), "bce target length mismatch");
        let mut total = T::zero();
        for (&x, &y) in vz.data().iter().zip(targets) {
            total += x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p();
        }
        let ng = self.ng(z);
        self.push(Tensor::scalar(total), Op::BceWithLogits(z, targets.to_vec()), ng)
    }

    /// Output row `i` is `sum_(r, w) in mix[i]` of `w * table[r]`.
    pub fn row_mix(&mut self, table: Var, mix: Vec<Vec<(usize, T)>>) -> Var {
        let vt = self.value(table);
        let d = vt.cols();
        let mut out = Tensor::zeros(mix.len(), d);
        for (i, entries) in mix.iter().enumerate() {
            let orow = out.row_mut(i);
            for &(r, w) in entries {
                for (o, &x) in orow.iter_mut().zip(vt.row(r)) {
                    *o += w * x;
                }
            }
        }
        let ng = self.ng(table);
        self.push(out, Op::RowMix { table, mix }, ng)
    }

    /// Back-propagates from `seeds` (each a node with its upstream gradient).
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradient of a `1 x 1` node.
    pub fn backward_scalar(&self, loss: Var) -> Gradients<T> {
        self.backward(&[(loss, Tensor::scalar(T::one()))])
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let send = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| {
            if self.ng(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.shape();
                let n = vb.cols();
                if self.ng(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm_nt(g.data(), vb.data(), da.data_mut(), m, n, k);
                    send(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm_tn(va.data(), g.data(), db.data_mut(), m, k, n);
                    send(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.shape();
                let n = vb.rows();
                if self.ng(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm_nn(g.data(), vb.data(), da.data_mut(), m, n, k);
                    send(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(n, k);
                    gemm_tn(g.data(), va.data(), db.data_mut(), m, n, k);
                    send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.clone());
                if self.ng(*b) {
                    let mut nb = g.clone();
                    nb.scale_assign(-T::one());
                    send(grads, *b, nb);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let t = elementwise(g, self.value(*b), |x, y| x * y);
                    send(grads, *a, t);
                }
                if self.ng(*b) {
                    let t = elementwise(g, self.value(*a), |x, y| x * y);
                    send(grads, *b, t);
                }
            }
            Op::AddRow(a, row) => {
                send(grads, *a, g.clone());
                if self.ng(*row) {
                    send(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.ng(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (d, &x) in da.row_mut(i).iter_mut().zip(r.data()) {
                            *d *= x;
                        }
                    }
                    send(grads, *a, da);
                }
                if self.ng(*row) {
                    let prod = elementwise(g, self.value(*a), |x, y| x * y);
                    send(grads, *row, column_sums(&prod));
                }
            }
            Op::Scale(a, s) => {
                let mut t = g.clone();
                t.scale_assign(*s);
                send(grads, *a, t);
            }
            Op::AddConst(a) => send(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let t = elementwise(g, self.value(*a), |gv, x| gv * gelu_grad(x));
                send(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = elementwise(g, out, |gv, y| gv * y);
                send(grads, *a, t);
            }
            Op::Ln(a) => {
                let t = elementwise(g, self.value(*a), |gv, x| gv / x);
                send(grads, *a, t);
            }
            Op::ClampMin(a, floor) => {
                let t = elementwise(g, self.value(*a), |gv, x| if x < *floor { T::zero() } else { gv });
                send(grads, *a, t);
            }
            Op::LayerNorm { x, rstd } => {
                let (m, n) = out.shape();
                let nf = T::from_usize(n).unwrap();
                let mut dx = Tensor::zeros(m, n);
                for i in 0..m {
                    let (y, gy) = (out.row(i), g.row(i));
                    let mean_g = gy.iter().copied().sum::<T>() / nf;
                    let mean_gy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((d, &gv), &yv) in dx.row_mut(i).iter_mut().zip(gy).zip(y) {
                        *d = rstd[i] * (gv - mean_g - yv * mean_gy);
                    }
                }
                send(grads, *x, dx);
            }
            Op::Softmax(a) => {
                let (m, n) = out.shape();
                let mut dx = Tensor::zeros(m, n);
                for i in 0..m {
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &gv), &yv) in dx.row_mut(i).iter_mut().zip(gy).zip(y) {
                        *d = yv * (gv - dot);
                    }
                }
                send(grads, *a, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let (m, n) = out.shape();
                let mut dx = Tensor::zeros(m, n);
                for i in 0..m {
                    if norms[i] == T::zero() {
                        continue;
                    }
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &gv), &yv) in dx.row_mut(i).iter_mut().zip(gy).zip(y) {
                        *d = (gv - yv * dot) / norms[i];
                    }
                }
                send(grads, *x, dx);
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.shape(*a);
                let mut da = Tensor::zeros(m, n);
                for (k, &r) in idx.iter().enumerate() {
                    for (d, &gv) in da.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += gv;
                    }
                }
                send(grads, *a, da);
            }
            Op::Gather(a, flat) => {
                let (m, n) = self.shape(*a);
                let mut da = Tensor::zeros(m, n);
                for (k, &f) in flat.iter().enumerate() {
                    da.data_mut()[f] += g.data()[k];
                }
                send(grads, *a, da);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.shape(*a);
                let w = g.cols();
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    da.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                send(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        let mut dp = Tensor::zeros(m, w);
                        for i in 0..m {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        send(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        let dp = Tensor::new(h, n, g.data()[offset * n..(offset + h) * n].to_vec());
                        send(grads, p, dp);
                    }
                    offset += h;
                }
            }
            Op::Sum(a) => {
                let (m, n) = self.shape(*a);
                send(grads, *a, Tensor::filled(m, n, g.item()));
            }
            Op::LogSumExp(a) => {
                let va = self.value(*a);
                let lse = out.item();
                let gv = g.item();
                let t = Tensor::new(
                    va.rows(),
                    va.cols(),
                    va.data().iter().map(|&x| gv * (x - lse).exp()).collect(),
                );
                send(grads, *a, t);
            }
            Op::BceWithLogits(z, targets) => {
                let vz = self.value(*z);
                let gv = g.item();
                let t = Tensor::new(
                    vz.rows(),
                    vz.cols(),
                    vz.data()
                        .iter()
                        .zip(targets)
                        .map(|(&x, &y)| gv * (sigmoid(x) - y))
                        .collect(),
                );
                send(grads, *z, t);
            }
            Op::RowMix { table, mix } => {
                let (m, n) = self.shape(*table);
                let mut dt = Tensor::zeros(m, n);
                for (i, entries) in mix.iter().enumerate() {
                    for &(r, w) in entries {
                        for (d, &gv) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += w * gv;
                        }
                    }
                }
                send(grads, *table, dt);
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (m, n) = tape.shape(v);
                Tensor::zeros(m, n)
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn logsumexp<T: Scalar>(xs: &[T]) -> T {
    let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
