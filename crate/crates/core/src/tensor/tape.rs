//! Reverse-mode automatic differentiation over coarse tensor operations.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Tape::backward`] only has to walk it once in reverse.

use super::dense::{gemm, permute_data};
use super::{Real, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    /// `a[.., k] x b[k, n]`
    MatMul { a: usize, b: usize },
    /// `x[.., k] x w[k, n] + bias[n]`
    Linear { x: usize, w: usize, bias: usize },
    /// `a[t, m, k] x b[t, k, n]`, or `b[t, n, k]` transposed.
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    /// `b` broadcasts over the leading axes of `a`.
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: F },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax { x: usize },
    Gelu { x: usize },
    Gather { table: usize, ids: Vec<usize> },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Real> Tape<F> {
    /// A tape that records operations for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates values; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[usize]) -> Var {
        let requires_grad = self.recording && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[.., k] x b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(mismatch("matmul", ash, bsh));
        }
        let (k, n) = (bsh[0], bsh[1]);
        let m = av.len() / k.max(1);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Affine map `x[.., k] x w[k, n] + bias[n] -> [.., n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let (xsh, wsh) = (xv.shape(), wv.shape());
        if xsh.is_empty() || wsh.len() != 2 || xsh[xsh.len() - 1] != wsh[0] {
            return Err(mismatch("linear", xsh, wsh));
        }
        let (k, n) = (wsh[0], wsh[1]);
        if bv.shape() != [n] {
            return Err(mismatch("linear", wsh, bv.shape()));
        }
        let m = xv.len() / k.max(1);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(m, k, n, xv.data(), false, wv.data(), false, &mut out, true);
        let mut shape = xsh.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                bias: bias.0,
            },
            &[x.0, w.0, bias.0],
        ))
    }

    /// Batched product `a[t, m, k] x b[t, k, n]` (or `b[t, n, k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(mismatch("batch_matmul", ash, bsh));
        }
        let (t, m, k) = (ash[0], ash[1], ash[2]);
        let (bk, n) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if bk != k {
            return Err(mismatch("batch_matmul", ash, bsh));
        }
        let mut out = vec![F::zero(); t * m * n];
        for i in 0..t {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(vec![t, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    /// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s shape
    /// and is then repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(mismatch("add", ash, bsh));
        }
        let bl = bv.len();
        let mut out = av.data().to_vec();
        if bl > 0 {
            for chunk in out.chunks_mut(bl) {
                for (o, &y) in chunk.iter_mut().zip(bv.data()) {
                    *o = *o + y;
                }
            }
        }
        let value = Tensor::new(ash.to_vec(), out)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a: a.0, factor }, &[a.0])
    }

    /// Layer normalization over the last axis with an affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().ok_or_else(|| mismatch("layer_norm", xv.shape(), gv.shape()))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.len() / d.max(1);
        let df = F::from_usize(d).unwrap();
        let mut out = vec![F::zero(); xv.len()];
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = if self.recording {
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, op, &[x.0, gamma.0, beta.0]))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.shape().last().copied().unwrap_or(1).max(1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).fast_exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax { x: x.0 }, &[x.0])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = F::from_f64_lossy(0.5);
        let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        let value = self
            .value(x)
            .map(|v| half * v * (F::one() + (v * inv_sqrt2).erf()));
        self.push(value, Op::Gelu { x: x.0 }, &[x.0])
    }

    /// Rows of a `[vocab, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(mismatch("gather", tv.shape(), &[ids.len()]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let op = Op::Gather {
            table: table.0,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, &[table.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(mismatch("reshape", xv.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(mismatch("permute", xv.shape(), axes));
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), axes);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            &[x.0],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        self.permute(x, &[1, 0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = F::from_usize(xv.len().max(1)).unwrap();
        let value = Tensor::scalar(xv.sum() / n);
        self.push(value, Op::Mean { x: x.0 }, &[x.0])
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// requires them.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>, TensorError> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: out.value.shape().to_vec(),
            });
        }
        if !out.requires_grad {
            return Err(TensorError::NoTape);
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.value.shape(), F::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], target: usize, g: Tensor<F>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = *e + *v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k.max(1);
                if self.wants(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            &Op::Linear { x, w, bias } => {
                let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.len() / k.max(1);
                if self.wants(x) {
                    let mut dx = vec![F::zero(); m * k];
                    gemm(m, n, k, g.data(), false, wv.data(), true, &mut dx, false);
                    self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(w) {
                    let mut dw = vec![F::zero(); k * n];
                    gemm(k, m, n, xv.data(), true, g.data(), false, &mut dw, false);
                    self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if self.wants(bias) && n > 0 {
                    let mut db = vec![F::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, bias, Tensor::new(vec![n], db)?);
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let (t, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                let gd = g.data();
                if self.wants(a) {
                    let mut da = vec![F::zero(); t * m * k];
                    for i in 0..t {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        // C = A B  => dA = dC B^T ;  C = A B^T => dA = dC B
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(b) {
                    let mut db = vec![F::zero(); t * k * n];
                    for i in 0..t {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB[n, k] = dC^T A
                            gemm(n, m, k, gi, true, ai, false, dbi, false);
                        } else {
                            // dB[k, n] = A^T dC
                            gemm(k, m, n, ai, true, gi, false, dbi, false);
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    let bv = &self.nodes[b].value;
                    let bl = bv.len();
                    let mut db = vec![F::zero(); bl];
                    if bl > 0 {
                        for chunk in g.data().chunks(bl) {
                            for (d, &v) in db.iter_mut().zip(chunk) {
                                *d = *d + v;
                            }
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.map(|v| -v));
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.wants(b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            &Op::Scale { a, factor } => {
                self.accumulate(grads, a, g.map(|v| v * factor));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let gv = &self.nodes[gamma].value;
                let d = gv.len();
                let rows = rstd.len();
                let df = F::from_usize(d).unwrap();
                if self.wants(gamma) || self.wants(beta) {
                    let mut dg = vec![F::zero(); d];
                    let mut dbeta = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gy = g.data()[r * d + j];
                            dg[j] = dg[j] + gy * xhat[r * d + j];
                            dbeta[j] = dbeta[j] + gy;
                        }
                    }
                    self.accumulate(grads, gamma, Tensor::new(vec![d], dg)?);
                    self.accumulate(grads, beta, Tensor::new(vec![d], dbeta)?);
                }
                if self.wants(x) {
                    let mut dx = vec![F::zero(); rows * d];
                    for r in 0..rows {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv.data()[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / df;
                        mean_dh_h = mean_dh_h / df;
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv.data()[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    let shape = self.nodes[x].value.shape().to_vec();
                    self.accumulate(grads, x, Tensor::new(shape, dx)?);
                }
            }
            &Op::Softmax { x } => {
                let y = &node.value;
                let d = y.shape().last().copied().unwrap_or(1).max(1);
                let mut dx = vec![F::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            &Op::Gelu { x } => {
                let xv = &self.nodes[x].value;
                let half = F::from_f64_lossy(0.5);
                let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = F::from_f64_lossy(0.398_942_280_401_432_7);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gy)| {
                        let cdf = half * (F::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt2pi * (-half * v * v).fast_exp();
                        gy * (cdf + v * pdf)
                    })
                    .collect();
                self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Gather { table, ids } => {
                let tv = &self.nodes[*table].value;
                let d = tv.shape()[1];
                let mut dt = vec![F::zero(); tv.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g.data()[row * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
            &Op::Reshape { x } => {
                let shape = self.nodes[x].value.shape().to_vec();
                self.accumulate(grads, x, Tensor::new(shape, g.data().to_vec())?);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (data, shape) = permute_data(g.data(), g.shape(), &inverse);
                self.accumulate(grads, *x, Tensor::new(shape, data)?);
            }
            &Op::Sum { x } => {
                let shape = self.nodes[x].value.shape().to_vec();
                self.accumulate(grads, x, Tensor::full(&shape, g.data()[0]));
            }
            &Op::Mean { x } => {
                let xv = &self.nodes[x].value;
                let n = F::from_usize(xv.len().max(1)).unwrap();
                self.accumulate(grads, x, Tensor::full(xv.shape(), g.data()[0] / n));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(&[4]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert_relative_eq!(v, 0.25);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::full(&[5], 3.7));
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.5]).unwrap());
        let y = tape.softmax(x);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_without_tape_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NoTape)));

        let mut tape = Tape::<f64>::inference();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NoTape)));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn shape_mismatch_names_op_and_dims() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_string_mentions(tape.add(a, b), "add"));
    }

    fn err_string_mentions<T: std::fmt::Debug>(r: Result<T, TensorError>, needle: &str) -> bool {
        r.unwrap_err().to_string().contains(needle)
    }

    #[test]
    fn fan_out_gradients_are_summed() {
        // f = x*y + x  => df/dx = y + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(5.0));
        let xy = tape.mul(x, y).unwrap();
        let f = tape.add(xy, x).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
        assert_eq!(grads.get(y).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn gather_rejects_unknown_ids() {
        let mut tape = Tape::<f32>::new();
        let t = tape.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.gather(t, &[0, 3]),
            Err(TensorError::IndexOutOfRange { index: 3, bound: 3, .. })
        ));
    }
}
