//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. Nodes are created in
//! topological order, so `backward` walks the node list in reverse and
//! accumulates (never overwrites) gradient contributions into each input.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gelu, gelu_grad, rmsnorm_row, sigmoid, softplus};
use super::tensor::as_matrix;
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::masks::MaskMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn index_for_tests(i: usize) -> Self {
        Var(i)
    }
}

/// Backward rule for an op implemented outside the tape.
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn as_any(&self) -> &dyn core::any::Any;

    /// Returns one gradient per input; entries for inputs with
    /// `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

/// Multiply-add counts recorded by forward ops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounts {
    /// Dense projections (matmul ops).
    pub matmul_macs: u64,
    /// Query-key dot products inside attention.
    pub attn_score_macs: u64,
    /// Probability-weighted value sums inside attention.
    pub attn_value_macs: u64,
    /// State-space recurrences.
    pub ssm_macs: u64,
}

impl FlopCounts {
    pub fn attention_macs(&self) -> u64 {
        self.attn_score_macs + self.attn_value_macs
    }

    pub fn total_macs(&self) -> u64 {
        self.matmul_macs + self.attention_macs() + self.ssm_macs
    }

    /// Counts accumulated since the snapshot `earlier`.
    pub fn since(&self, earlier: &FlopCounts) -> FlopCounts {
        FlopCounts {
            matmul_macs: self.matmul_macs - earlier.matmul_macs,
            attn_score_macs: self.attn_score_macs - earlier.attn_score_macs,
            attn_value_macs: self.attn_value_macs - earlier.attn_value_macs,
            ssm_macs: self.ssm_macs - earlier.ssm_macs,
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softplus(Var),
    Exp(Var),
    Gelu(Var),
    Sum(Var),
    RowSlice { a: Var, start: usize },
    RmsNorm { x: Var, w: Var, inv_rms: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    MaskedSoftmax { scores: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Gelu(_) => "gelu",
            Op::Sum(_) => "sum",
            Op::RowSlice { .. } => "row_slice",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    flops: FlopCounts,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn grad_slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), flops: FlopCounts::default(), first_nonfinite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCounts {
        self.flops
    }

    pub fn flops_mut(&mut self) -> &mut FlopCounts {
        &mut self.flops
    }

    /// First node whose forward value contained NaN/Inf, with its op name.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(idx)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = as_matrix("matmul", av)?;
        let (r, c) = as_matrix("matmul", bv)?;
        let (k2, p, b_strides) = if trans_b { (c, r, (1, c)) } else { (r, c, (c, 1)) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}{}", av.shape(), bv.shape(), if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * p];
        T::gemm(m, k, p, av.data(), (k, 1), bv.data(), b_strides, T::zero(), &mut out);
        self.flops.matmul_macs += (m * k * p) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, p], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let av = self.value(a);
        let bv = self.value(b);
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Rows `start..end` of a matrix.
    pub fn row_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = as_matrix("row_slice", av)?;
        if start > end || end > m {
            return Err(shape_err("row_slice", format!("{start}..{end} of {m} rows")));
        }
        let t = Tensor::new(&[end - start, n], av.data()[start * n..end * n].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::RowSlice { a, start }, rg))
    }

    /// Row-wise RMS normalization with a learned gain, ε = 1e-5.
    pub fn rmsnorm(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (rows, cols) = as_matrix("rmsnorm", xv)?;
        if wv.len() != cols {
            return Err(shape_err("rmsnorm", format!("weight {:?} for width {cols}", wv.shape())));
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for i in 0..rows {
            inv_rms.push(rmsnorm_row(xv.row(i), wv.data(), &mut out[i * cols..(i + 1) * cols]));
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(t, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, dim) = as_matrix("embedding", tv)?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { what: "embedding table", index: id, len: vocab });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), dim], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = as_matrix("cross_entropy", lv)?;
        if rows != targets.len() || rows == 0 {
            return Err(shape_err("cross_entropy", format!("{rows} rows vs {} targets", targets.len())));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Index { what: "vocabulary", index: t, len: vocab });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            let mut denom = T::zero();
            for (pj, &z) in p.iter_mut().zip(row) {
                *pj = (z - max).exp();
                denom += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= denom;
            }
            total += denom.ln() + max - row[t];
        }
        let loss = total / T::from_usize(rows).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Softmax over the trailing axis restricted to the keys `mask` allows.
    ///
    /// `scores` has shape `[..., n_q, n_k]`; the mask is broadcast over any
    /// leading axes. Disallowed entries are exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &MaskMatrix) -> Result<Var> {
        let sv = self.value(scores);
        let shape = sv.shape();
        if shape.len() < 2 || shape[shape.len() - 2] != mask.n_q() || shape[shape.len() - 1] != mask.n_k() {
            return Err(shape_err("masked_softmax", format!("scores {shape:?} vs mask {}x{}", mask.n_q(), mask.n_k())));
        }
        let out = masked_softmax_values(sv, mask)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(out, Op::MaskedSoftmax { scores }, rg))
    }

    /// Downcasts the custom op stored at `v`, if it is an `O`.
    pub fn custom_op<O: 'static>(&self, v: Var) -> Option<&O> {
        match &self.nodes[v.0].op {
            Op::Custom { op, .. } => op.as_any().downcast_ref::<O>(),
            _ => None,
        }
    }

    /// Records an externally computed op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if let Some((idx, name)) = self.first_nonfinite {
            if idx <= loss.0 {
                return Err(Error::NonFinite(format!("{name} (node {idx})")));
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = (av.rows(), av.cols());
                let p = node.value.cols();
                if needs(a) {
                    let ga = grad_slot(grads, a, av.shape());
                    // d_a = g · bᵀ (or g · b when b was used transposed)
                    let strides = if trans_b { (k, 1) } else { (1, p) };
                    T::gemm(m, p, k, g.data(), (p, 1), bv.data(), strides, T::one(), ga.data_mut());
                }
                if needs(b) {
                    let gb = grad_slot(grads, b, bv.shape());
                    if trans_b {
                        // d_b = gᵀ · a
                        T::gemm(p, m, k, g.data(), (1, p), av.data(), (k, 1), T::one(), gb.data_mut());
                    } else {
                        // d_b = aᵀ · g
                        T::gemm(k, m, p, av.data(), (1, k), g.data(), (p, 1), T::one(), gb.data_mut());
                    }
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if needs(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if needs(b) {
                    accumulate(grads, b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                if needs(a) {
                    accumulate(grads, a, zip_map(g, bv, |x, y| x * y));
                }
                if needs(b) {
                    accumulate(grads, b, zip_map(g, av, |x, y| x * y));
                }
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.map(|x| x * s)),
            &Op::Softplus(a) => accumulate(grads, a, zip_map(g, self.value(a), |gi, x| gi * sigmoid(x))),
            &Op::Exp(a) => accumulate(grads, a, zip_map(g, &node.value, |gi, y| gi * y)),
            &Op::Gelu(a) => accumulate(grads, a, zip_map(g, self.value(a), |gi, x| gi * gelu_grad(x))),
            &Op::Sum(a) => {
                let shape = self.value(a).shape();
                accumulate(grads, a, Tensor::full(shape, g.item()));
            }
            &Op::RowSlice { a, start } => {
                let av = self.value(a);
                let cols = av.cols();
                let ga = grad_slot(grads, a, av.shape());
                let dst = &mut ga.data_mut()[start * cols..start * cols + g.len()];
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let xv = self.value(x);
                let wv = self.value(w);
                let cols = xv.cols();
                let n = T::from_usize(cols).unwrap();
                if needs(x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    for (i, &r) in inv_rms.iter().enumerate() {
                        let xr = xv.row(i);
                        let gr = g.row(i);
                        let proj: T = (0..cols).map(|j| gr[j] * wv.data()[j] * xr[j]).sum();
                        let c = r * r * r * proj / n;
                        for j in 0..cols {
                            gx[i * cols + j] = r * wv.data()[j] * gr[j] - c * xr[j];
                        }
                    }
                    accumulate(grads, x, Tensor::new(xv.shape(), gx).unwrap());
                }
                if needs(w) {
                    let gw = grad_slot(grads, w, wv.shape());
                    for (i, &r) in inv_rms.iter().enumerate() {
                        for ((d, &gi), &xi) in gw.data_mut().iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *d += gi * xi * r;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let gt = grad_slot(grads, *table, tv.shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &s) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let vocab = lv.cols();
                let scale = g.item() / T::from_usize(targets.len()).unwrap();
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * vocab + t] -= T::one();
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                accumulate(grads, *logits, Tensor::new(lv.shape(), gl).unwrap());
            }
            Op::MaskedSoftmax { scores, .. } => {
                let p = &node.value;
                let cols = p.shape()[p.rank() - 1];
                let mut gs = vec![T::zero(); p.len()];
                for ((gs_row, p_row), g_row) in
                    gs.chunks_mut(cols).zip(p.data().chunks(cols)).zip(g.data().chunks(cols))
                {
                    let s: T = p_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                    for ((d, &pj), &gj) in gs_row.iter_mut().zip(p_row).zip(g_row) {
                        *d = pj * (gj - s);
                    }
                }
                accumulate(grads, *scores, Tensor::new(p.shape(), gs).unwrap());
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let need: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
                let contributions = op.backward(&values, &node.value, g, &need);
                for ((&v, c), n) in inputs.iter().zip(contributions).zip(need) {
                    if let (Some(c), true) = (c, n) {
                        accumulate(grads, v, c);
                    }
                }
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

/// Tape-free masked softmax (see [`Tape::masked_softmax`]).
pub fn masked_softmax_values<T: Scalar>(scores: &Tensor<T>, mask: &MaskMatrix) -> Result<Tensor<T>> {
    let cols = mask.n_k();
    let rows = mask.n_q();
    let mut out = vec![T::zero(); scores.len()];
    for (r, (o, s)) in out.chunks_mut(cols).zip(scores.data().chunks(cols)).enumerate() {
        let allowed = mask.row(r % rows);
        let mut max = T::neg_infinity();
        for (&v, &ok) in s.iter().zip(allowed) {
            if ok && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::InvalidMask { row: r % rows });
        }
        let mut denom = T::zero();
        for ((oj, &v), &ok) in o.iter_mut().zip(s).zip(allowed) {
            if ok {
                *oj = (v - max).exp();
                denom += *oj;
            }
        }
        for oj in o.iter_mut() {
            *oj /= denom;
        }
    }
    Tensor::new(scores.shape(), out)
}
