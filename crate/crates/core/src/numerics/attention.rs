//! Fused multi-head attention over an explicit per-query key list.
//!
//! Masked-out keys are omitted rather than set to −∞, so the recorded
//! multiply-add counts reflect only the work a compressed-cache kernel does.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{attend_query, dot};
use super::tape::{CustomOp, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::masks::MaskMatrix;

/// Per-query lists of visible key indices, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyLists {
    rows: Vec<Vec<usize>>,
    n_k: usize,
}

impl KeyLists {
    pub fn new(rows: Vec<Vec<usize>>, n_k: usize) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::InvalidMask { row: i });
            }
            if r.windows(2).any(|w| w[0] >= w[1]) || r.iter().any(|&j| j >= n_k) {
                return Err(Error::Contract(format!("key list for row {i} is not an ascending subset of 0..{n_k}")));
            }
        }
        Ok(Self { rows, n_k })
    }

    pub fn from_mask(mask: &MaskMatrix) -> Result<Self> {
        Self::new((0..mask.n_q()).map(|i| mask.row_indices(i)).collect(), mask.n_k())
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn n_q(&self) -> usize {
        self.rows.len()
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    /// Total number of visible (query, key) pairs.
    pub fn pairs(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

fn check_inputs<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, keys: &KeyLists) -> Result<()> {
    let width = q.cols();
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(shape_err("attention", "q, k, v must be matrices".into()));
    }
    if k.cols() != width || v.cols() != width || k.rows() != v.rows() {
        return Err(shape_err("attention", format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(shape_err("attention", format!("width {width} not divisible by {heads} heads")));
    }
    if keys.n_q() != q.rows() || keys.n_k() != k.rows() {
        return Err(shape_err(
            "attention",
            format!("key lists {}x{} vs q rows {} / k rows {}", keys.n_q(), keys.n_k(), q.rows(), k.rows()),
        ));
    }
    Ok(())
}

fn forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    keys: &KeyLists,
) -> (Tensor<T>, Vec<T>) {
    let width = q.cols();
    let scale = T::one() / T::from_usize(width / heads).unwrap().sqrt();
    let mut out = vec![T::zero(); q.rows() * width];
    let mut probs = Vec::with_capacity(keys.pairs() * heads);
    let mut kr: Vec<&[T]> = Vec::new();
    let mut vr: Vec<&[T]> = Vec::new();
    for (i, row) in keys.rows().iter().enumerate() {
        kr.clear();
        vr.clear();
        kr.extend(row.iter().map(|&j| k.row(j)));
        vr.extend(row.iter().map(|&j| v.row(j)));
        attend_query(q.row(i), &kr, &vr, heads, scale, &mut out[i * width..(i + 1) * width], &mut probs);
    }
    (Tensor::new(&[q.rows(), width], out).unwrap(), probs)
}

/// Tape-free attention; returns the output and head-major probabilities.
pub fn attention_values<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    keys: &KeyLists,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_inputs(q, k, v, heads, keys)?;
    Ok(forward(q, k, v, heads, keys))
}

struct AttentionOp<T> {
    heads: usize,
    keys: KeyLists,
    probs: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn as_any(&self) -> &dyn core::any::Any {
        self
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let width = q.cols();
        let d = width / self.heads;
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let mut dq = vec![T::zero(); q.len()];
        let mut dk = vec![T::zero(); k.len()];
        let mut dv = vec![T::zero(); v.len()];
        let mut dp = Vec::new();
        let mut offset = 0;
        for (i, row) in self.keys.rows().iter().enumerate() {
            let m = row.len();
            for h in 0..self.heads {
                let span = h * d..(h + 1) * d;
                let p = &self.probs[offset..offset + m];
                offset += m;
                let go = &g.row(i)[span.clone()];
                dp.clear();
                dp.extend(row.iter().map(|&j| dot(go, &v.row(j)[span.clone()])));
                let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qh = &q.row(i)[span.clone()];
                for (idx, &j) in row.iter().enumerate() {
                    let ds = p[idx] * (dp[idx] - s) * scale;
                    let kj = &k.row(j)[span.clone()];
                    for t in 0..d {
                        dq[i * width + h * d + t] += ds * kj[t];
                        dk[j * width + h * d + t] += ds * qh[t];
                        dv[j * width + h * d + t] += p[idx] * go[t];
                    }
                }
            }
        }
        let wrap = |need: bool, data: Vec<T>, like: &Tensor<T>| need.then(|| Tensor::new(like.shape(), data).unwrap());
        vec![wrap(needs[0], dq, q), wrap(needs[1], dk, k), wrap(needs[2], dv, v)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Scaled dot-product attention (scale `1/√(width/heads)`) where query
    /// `i` sees exactly the keys in `keys.rows()[i]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, keys: &KeyLists) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        check_inputs(qv, kv, vv, heads, keys)?;
        let (out, probs) = forward(qv, kv, vv, heads, keys);
        let macs = (keys.pairs() * qv.cols()) as u64;
        let flops = self.flops_mut();
        flops.attn_score_macs += macs;
        flops.attn_value_macs += macs;
        let op = AttentionOp { heads, keys: keys.clone(), probs };
        Ok(self.custom(&[q, k, v], out, Box::new(op)))
    }

    /// Attention probabilities recorded by an [`attention`](Self::attention)
    /// node, expanded to a dense `[heads, n_q, n_k]` tensor.
    pub fn attention_probs(&self, node: Var) -> Option<Tensor<T>> {
        let op = self.custom_op::<AttentionOp<T>>(node)?;
        let (h, nq, nk) = (op.heads, op.keys.n_q(), op.keys.n_k());
        let mut dense = vec![T::zero(); h * nq * nk];
        let mut offset = 0;
        for (i, row) in op.keys.rows().iter().enumerate() {
            for head in 0..h {
                for &j in row {
                    dense[(head * nq + i) * nk + j] = op.probs[offset];
                    offset += 1;
                }
            }
        }
        Tensor::new(&[h, nq, nk], dense).ok()
    }
}
