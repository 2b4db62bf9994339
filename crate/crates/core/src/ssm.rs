//! Selective diagonal state-space scan with segment resets.
//!
//! Per channel `e` and state slot `s`:
//!
//! ```text
//! Δ_t[e]   = softplus(x_t[e]·w_Δ[e] + b_Δ[e])
//! h_t[e,s] = exp(Δ_t[e]·A[e,s])·h_{t-1}[e,s] + Δ_t[e]·B_t[s]·x_t[e]
//! y_t[e]   = Σ_s C_t[s]·h_t[e,s] + (d_skip[e] + 1)·x_t[e]
//! ```
//!
//! with `A = -exp(a_log)`, `B_t = x_t·w_B`, `C_t = x_t·w_C`, and
//! `h_{t-1} := 0` wherever a reset is flagged.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::chunking::ChunkPlan;
use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::{dot, sigmoid, softplus};
use crate::numerics::{CustomOp, Scalar, Tape, Tensor, Var};

/// Parameters of one SSM; `W` is a [`Tensor`] or a tape [`Var`].
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<W> {
    /// `[E, D_S]` log-magnitudes of the (negative) decay rates.
    pub a_log: W,
    /// `[E, D_S]` input projection.
    pub w_b: W,
    /// `[E, D_S]` output projection.
    pub w_c: W,
    /// `[E]` step-size gain.
    pub w_delta: W,
    /// `[E]` step-size bias.
    pub b_delta: W,
    /// `[E]` direct feed-through.
    pub d_skip: W,
}

impl<W> SsmParams<W> {
    pub fn fields(&self) -> [(&'static str, &W); 6] {
        [
            ("a_log", &self.a_log),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("w_delta", &self.w_delta),
            ("b_delta", &self.b_delta),
            ("d_skip", &self.d_skip),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut W); 6] {
        [
            ("a_log", &mut self.a_log),
            ("w_b", &mut self.w_b),
            ("w_c", &mut self.w_c),
            ("w_delta", &mut self.w_delta),
            ("b_delta", &mut self.b_delta),
            ("d_skip", &mut self.d_skip),
        ]
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&'static str, &'a W) -> U) -> SsmParams<U> {
        SsmParams {
            a_log: f("a_log", &self.a_log),
            w_b: f("w_b", &self.w_b),
            w_c: f("w_c", &self.w_c),
            w_delta: f("w_delta", &self.w_delta),
            b_delta: f("b_delta", &self.b_delta),
            d_skip: f("d_skip", &self.d_skip),
        }
    }
}

/// Number of scalars in one SSM of width `dim` and state size `state_dim`.
pub fn ssm_param_count(dim: usize, state_dim: usize) -> usize {
    3 * dim * state_dim + 3 * dim
}

/// Softplus of this bias is ≈ 0.1.
fn initial_delta_bias() -> f64 {
    Float::ln(Float::exp(0.1f64) - 1.0)
}

/// Standard normal scaled by `std`, resampled outside ±2σ.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Scalar> SsmParams<Tensor<T>> {
    /// Stable-recurrence initialization: decay rates evenly spaced over
    /// `[1, D_S]`, step sizes near 0.1, small random projections.
    pub fn init<R: Rng + ?Sized>(dim: usize, state_dim: usize, rng: &mut R) -> Self {
        let a_log = Tensor::from_fn(&[dim, state_dim], |i| {
            let s = i % state_dim;
            T::lit(Float::ln(1.0 + s as f64))
        });
        let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(trunc_normal(rng, 0.02)));
        let w_b = normal(&[dim, state_dim]);
        let w_c = normal(&[dim, state_dim]);
        let w_delta = normal(&[dim]);
        Self {
            a_log,
            w_b,
            w_c,
            w_delta,
            b_delta: Tensor::full(&[dim], T::lit(initial_delta_bias())),
            d_skip: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.a_log.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.cols()
    }

    pub fn param_count(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        let (e, ds) = (self.dim(), self.state_dim());
        if ds == 0 || e == 0 {
            return Err(Error::Config(format!("SSM needs E ≥ 1 and D_S ≥ 1, got {e}x{ds}")));
        }
        for (name, t) in self.fields() {
            let expected: &[usize] = match name {
                "a_log" | "w_b" | "w_c" => &[e, ds],
                _ => &[e],
            };
            if t.shape() != expected {
                return Err(shape_err("ssm", format!("{name} has shape {:?}, expected {expected:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Recurrent state carried between decode steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState<T> {
    /// `[E, D_S]` hidden state.
    pub h: Tensor<T>,
    /// Tokens absorbed since the last reset.
    pub position_in_chunk: usize,
}

impl<T: Scalar> SsmState<T> {
    pub fn zeros(dim: usize, state_dim: usize) -> Self {
        Self { h: Tensor::zeros(&[dim, state_dim]), position_in_chunk: 0 }
    }
}

/// Borrowed parameter slices with `A = -exp(a_log)` precomputed.
struct Kernel<'a, T> {
    e: usize,
    ds: usize,
    a: Vec<T>,
    w_b: &'a [T],
    w_c: &'a [T],
    w_delta: &'a [T],
    b_delta: &'a [T],
    d_skip: &'a [T],
}

/// Per-step intermediates kept for the backward pass.
struct StepRecord<'s, T> {
    b: &'s mut [T],
    c: &'s mut [T],
    z: &'s mut [T],
    delta: &'s mut [T],
    decay: &'s mut [T],
}

impl<'a, T: Scalar> Kernel<'a, T> {
    fn new(p: &'a SsmParams<Tensor<T>>) -> Self {
        Self {
            e: p.dim(),
            ds: p.state_dim(),
            a: p.a_log.data().iter().map(|&v| -v.exp()).collect(),
            w_b: p.w_b.data(),
            w_c: p.w_c.data(),
            w_delta: p.w_delta.data(),
            b_delta: p.b_delta.data(),
            d_skip: p.d_skip.data(),
        }
    }

    /// Advances `h` by one token and writes the output to `y`.
    fn step(&self, h: &mut [T], x: &[T], y: &mut [T], rec: StepRecord<'_, T>) {
        let (e, ds) = (self.e, self.ds);
        for v in rec.b.iter_mut().chain(rec.c.iter_mut()) {
            *v = T::zero();
        }
        for (ei, &xe) in x.iter().enumerate() {
            let wb = &self.w_b[ei * ds..(ei + 1) * ds][..ds];
            let wc = &self.w_c[ei * ds..(ei + 1) * ds][..ds];
            let (b, c) = (&mut rec.b[..ds], &mut rec.c[..ds]);
            for s in 0..ds {
                b[s] += xe * wb[s];
                c[s] += xe * wc[s];
            }
        }
        for ei in 0..e {
            let xe = x[ei];
            let z = xe * self.w_delta[ei] + self.b_delta[ei];
            let delta = softplus(z);
            rec.z[ei] = z;
            rec.delta[ei] = delta;
            let a = &self.a[ei * ds..(ei + 1) * ds][..ds];
            let hs = &mut h[ei * ds..(ei + 1) * ds][..ds];
            let dec = &mut rec.decay[ei * ds..(ei + 1) * ds][..ds];
            let drive = delta * xe;
            let (b, c) = (&rec.b[..ds], &rec.c[..ds]);
            for (d, &av) in dec.iter_mut().zip(a) {
                *d = (delta * av).exp();
            }
            for s in 0..ds {
                hs[s] = dec[s] * hs[s] + drive * b[s];
            }
            let acc = dot(c, hs);
            y[ei] = acc + (self.d_skip[ei] + T::one()) * xe;
        }
    }
}

fn check_scan_inputs<T: Scalar>(params: &SsmParams<Tensor<T>>, x: &Tensor<T>, resets: &[bool]) -> Result<()> {
    params.validate()?;
    if x.rank() != 2 || x.cols() != params.dim() {
        return Err(shape_err("ssm_scan", format!("input {:?} for width {}", x.shape(), params.dim())));
    }
    if resets.len() != x.rows() {
        return Err(Error::Contract(format!("ssm_scan got {} reset flags for {} tokens", resets.len(), x.rows())));
    }
    if resets.first() == Some(&false) {
        return Err(Error::Contract("the first token must start a segment".into()));
    }
    Ok(())
}

/// Full scan intermediates.
struct ScanCache<T> {
    b: Vec<T>,
    c: Vec<T>,
    z: Vec<T>,
    delta: Vec<T>,
    decay: Vec<T>,
    h: Vec<T>,
}

fn scan_forward<T: Scalar>(
    params: &SsmParams<Tensor<T>>,
    x: &Tensor<T>,
    resets: &[bool],
) -> (Tensor<T>, ScanCache<T>, usize) {
    let k = Kernel::new(params);
    let (n, e, ds) = (x.rows(), k.e, k.ds);
    let mut cache = ScanCache {
        b: vec![T::zero(); n * ds],
        c: vec![T::zero(); n * ds],
        z: vec![T::zero(); n * e],
        delta: vec![T::zero(); n * e],
        decay: vec![T::zero(); n * e * ds],
        h: vec![T::zero(); n * e * ds],
    };
    let mut y = vec![T::zero(); n * e];
    let mut h = vec![T::zero(); e * ds];
    let mut since_reset = 0;
    for t in 0..n {
        if resets[t] {
            h.iter_mut().for_each(|v| *v = T::zero());
            since_reset = 0;
        }
        since_reset += 1;
        let rec = StepRecord {
            b: &mut cache.b[t * ds..(t + 1) * ds],
            c: &mut cache.c[t * ds..(t + 1) * ds],
            z: &mut cache.z[t * e..(t + 1) * e],
            delta: &mut cache.delta[t * e..(t + 1) * e],
            decay: &mut cache.decay[t * e * ds..(t + 1) * e * ds],
        };
        k.step(&mut h, x.row(t), &mut y[t * e..(t + 1) * e], rec);
        cache.h[t * e * ds..(t + 1) * e * ds].copy_from_slice(&h);
    }
    (Tensor::new(&[n, e], y).unwrap(), cache, since_reset)
}

/// Multiply-adds per token for width `dim` and state size `state_dim`.
pub fn ssm_macs_per_token(dim: usize, state_dim: usize) -> u64 {
    5 * (dim * state_dim) as u64
}

/// Runs the recurrence over `x` (`[n, E]`), restarting wherever `resets`
/// is set. `resets[0]` must be true.
pub fn ssm_scan<T: Scalar>(params: &SsmParams<Tensor<T>>, x: &Tensor<T>, resets: &[bool]) -> Result<Tensor<T>> {
    ssm_scan_with_state(params, x, resets).map(|(y, _)| y)
}

/// [`ssm_scan`] that also returns the state after the last token.
pub fn ssm_scan_with_state<T: Scalar>(
    params: &SsmParams<Tensor<T>>,
    x: &Tensor<T>,
    resets: &[bool],
) -> Result<(Tensor<T>, SsmState<T>)> {
    check_scan_inputs(params, x, resets)?;
    let (y, cache, since_reset) = scan_forward(params, x, resets);
    let (e, ds) = (params.dim(), params.state_dim());
    let n = x.rows();
    let h = if n == 0 { vec![T::zero(); e * ds] } else { cache.h[(n - 1) * e * ds..].to_vec() };
    Ok((y, SsmState { h: Tensor::new(&[e, ds], h)?, position_in_chunk: since_reset }))
}

/// One recurrence step; `reset` zeroes the incoming state first.
pub fn ssm_step<T: Scalar>(
    params: &SsmParams<Tensor<T>>,
    state: &SsmState<T>,
    x_t: &[T],
    reset: bool,
) -> Result<(Vec<T>, SsmState<T>)> {
    params.validate()?;
    let (e, ds) = (params.dim(), params.state_dim());
    if x_t.len() != e {
        return Err(shape_err("ssm_step", format!("input of width {} for E = {e}", x_t.len())));
    }
    if state.h.shape() != [e, ds] {
        return Err(shape_err("ssm_step", format!("state {:?} for [{e}, {ds}]", state.h.shape())));
    }
    let k = Kernel::new(params);
    let mut h = if reset { vec![T::zero(); e * ds] } else { state.h.data().to_vec() };
    let (mut b, mut c) = (vec![T::zero(); ds], vec![T::zero(); ds]);
    let (mut z, mut delta) = (vec![T::zero(); e], vec![T::zero(); e]);
    let mut decay = vec![T::zero(); e * ds];
    let mut y = vec![T::zero(); e];
    let rec = StepRecord { b: &mut b, c: &mut c, z: &mut z, delta: &mut delta, decay: &mut decay };
    k.step(&mut h, x_t, &mut y, rec);
    let position_in_chunk = if reset { 1 } else { state.position_in_chunk + 1 };
    Ok((y, SsmState { h: Tensor::new(&[e, ds], h)?, position_in_chunk }))
}

/// `resets[t]` is true iff `t = 0` or `t - 1` closes a chunk at `layer`.
pub fn resets_from_plan(plan: &ChunkPlan, layer: usize) -> Vec<bool> {
    let mut resets = vec![false; plan.n];
    if let Some(first) = resets.first_mut() {
        *first = true;
    }
    for &b in plan.boundaries(layer) {
        if b + 1 < plan.n {
            resets[b + 1] = true;
        }
    }
    resets
}

/// Inner slot loop of the scan backward. Taking the slices as arguments
/// lets the compiler assume they do not alias and vectorize without checks.
#[inline(never)]
#[allow(clippy::too_many_arguments)]
fn slot_backward<T: Scalar>(
    dhn: &mut [T],
    dc: &mut [T],
    dacc: &mut [T],
    db: &mut [T],
    sa: &mut [T],
    sb: &mut [T],
    h: &[T],
    h_prev: &[T],
    d: &[T],
    av: &[T],
    ct: &[T],
    bt: &[T],
    ge: T,
    xe: T,
    de: T,
) {
    let n = dhn.len();
    let (dc, dacc, db, sa, sb) = (&mut dc[..n], &mut dacc[..n], &mut db[..n], &mut sa[..n], &mut sb[..n]);
    let (h, h_prev, d, av, ct, bt) = (&h[..n], &h_prev[..n], &d[..n], &av[..n], &ct[..n], &bt[..n]);
    for s in 0..n {
        let dh = dhn[s] + ge * ct[s];
        dc[s] += ge * h[s];
        let da = dh * h_prev[s] * d[s];
        dacc[s] += da * de;
        let dhb = dh * bt[s];
        db[s] += dh * de * xe;
        sa[s] = da * av[s] + dhb * xe;
        sb[s] = dhb;
        dhn[s] = dh * d[s];
    }
}

struct ScanOp<T> {
    resets: Vec<bool>,
    cache: ScanCache<T>,
}

impl<T: Scalar> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "ssm_scan"
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
        let [x, a_log, w_b, w_c, w_delta, _b_delta, d_skip] = inputs else { unreachable!("scan op has seven inputs") };
        let (n, e, ds) = (x.rows(), x.cols(), a_log.cols());
        let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
        let cache = &self.cache;

        let mut dx = vec![T::zero(); n * e];
        let mut d_a = vec![T::zero(); e * ds];
        let mut dw_b = vec![T::zero(); e * ds];
        let mut dw_c = vec![T::zero(); e * ds];
        let mut dw_delta = vec![T::zero(); e];
        let mut db_delta = vec![T::zero(); e];
        let mut dd_skip = vec![T::zero(); e];

        let mut dh_next = vec![T::zero(); e * ds];
        let mut db_t = vec![T::zero(); ds];
        let mut dc_t = vec![T::zero(); ds];
        let mut ddelta = vec![T::zero(); e];
        let mut scratch_a = vec![T::zero(); ds];
        let mut scratch_b = vec![T::zero(); ds];
        let zeros = vec![T::zero(); e * ds];

        for t in (0..n).rev() {
            let gy = g.row(t);
            let xt = x.row(t);
            let bt = &cache.b[t * ds..(t + 1) * ds];
            let ct = &cache.c[t * ds..(t + 1) * ds];
            let delta = &cache.delta[t * e..(t + 1) * e];
            let z = &cache.z[t * e..(t + 1) * e];
            let dec = &cache.decay[t * e * ds..(t + 1) * e * ds];
            let ht = &cache.h[t * e * ds..(t + 1) * e * ds];
            let hp = if self.resets[t] { &zeros[..] } else { &cache.h[(t - 1) * e * ds..t * e * ds] };
            db_t.iter_mut().for_each(|v| *v = T::zero());
            dc_t.iter_mut().for_each(|v| *v = T::zero());
            let dxt = &mut dx[t * e..(t + 1) * e];
            // Slot loops write per-slot terms to scratch instead of carrying
            // scalar reductions, so they vectorize.
            let (ct, bt) = (&ct[..ds], &bt[..ds]);
            for ei in 0..e {
                let (ge, xe, de) = (gy[ei], xt[ei], delta[ei]);
                dxt[ei] += ge * (d_skip.data()[ei] + T::one());
                dd_skip[ei] += ge * xe;
                let r = ei * ds..(ei + 1) * ds;
                let (dhn, h, h_prev, d) =
                    (&mut dh_next[r.clone()][..ds], &ht[r.clone()][..ds], &hp[r.clone()][..ds], &dec[r.clone()][..ds]);
                let (av, dacc) = (&a[r.clone()][..ds], &mut d_a[r][..ds]);
                let (dc, db, sa, sb) = (&mut dc_t[..ds], &mut db_t[..ds], &mut scratch_a[..ds], &mut scratch_b[..ds]);
                slot_backward(dhn, dc, dacc, db, sa, sb, h, h_prev, d, av, ct, bt, ge, xe, de);
                ddelta[ei] = sa.iter().copied().sum();
                dxt[ei] += de * sb.iter().copied().sum::<T>();
            }
            if self.resets[t] {
                dh_next.iter_mut().for_each(|v| *v = T::zero());
            }
            let (db, dc, sa) = (&db_t[..ds], &dc_t[..ds], &mut scratch_a[..ds]);
            for ei in 0..e {
                let xe = xt[ei];
                let dz = ddelta[ei] * sigmoid(z[ei]);
                dxt[ei] += dz * w_delta.data()[ei];
                dw_delta[ei] += dz * xe;
                db_delta[ei] += dz;
                let r = ei * ds..(ei + 1) * ds;
                let (wb, wc) = (&w_b.data()[r.clone()][..ds], &w_c.data()[r.clone()][..ds]);
                let (dwb, dwc) = (&mut dw_b[r.clone()][..ds], &mut dw_c[r][..ds]);
                for s in 0..ds {
                    sa[s] = db[s] * wb[s] + dc[s] * wc[s];
                    dwb[s] += xe * db[s];
                    dwc[s] += xe * dc[s];
                }
                dxt[ei] += sa.iter().copied().sum::<T>();
            }
        }
        // A = -exp(a_log) ⇒ dA/da_log = A
        let d_alog: Vec<T> = d_a.iter().zip(&a).map(|(&g, &av)| g * av).collect();

        let out = [dx, d_alog, dw_b, dw_c, dw_delta, db_delta, dd_skip];
        out.into_iter()
            .zip(inputs)
            .zip(needs)
            .map(|((data, like), &need)| need.then(|| Tensor::new(like.shape(), data).unwrap()))
            .collect()
    }
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`ssm_scan`].
    pub fn ssm_scan(&mut self, params: &SsmParams<Var>, x: Var, resets: &[bool]) -> Result<Var> {
        let values = params.map(|_, &v| self.value(v).clone());
        let xv = self.value(x);
        check_scan_inputs(&values, xv, resets)?;
        let (y, cache, _) = scan_forward(&values, xv, resets);
        self.flops_mut().ssm_macs += xv.rows() as u64 * ssm_macs_per_token(values.dim(), values.state_dim());
        let op = ScanOp { resets: resets.to_vec(), cache };
        let inputs = [x, params.a_log, params.w_b, params.w_c, params.w_delta, params.b_delta, params.d_skip];
        Ok(self.custom(&inputs, y, Box::new(op)))
    }
}
