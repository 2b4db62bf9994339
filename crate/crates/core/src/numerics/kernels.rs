//! Scalar kernels shared by the tape ops and the tape-free decode path, so
//! both evaluate identical arithmetic.

use super::Scalar;

pub const RMS_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow for large x
    if x > T::lit(20.0) {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Normalizes one row in place into `out`; returns `1/rms`.
pub fn rmsnorm_row<T: Scalar>(x: &[T], weight: &[T], out: &mut [T]) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
    inv
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Multi-head attention of one query over a gathered key/value list.
///
/// `q`, every key and every value are `heads * head_dim` wide. Writes the
/// attended output to `out` and appends `heads * keys.len()` probabilities
/// (head-major) to `probs`.
pub fn attend_query<T: Scalar>(
    q: &[T],
    keys: &[&[T]],
    values: &[&[T]],
    heads: usize,
    scale: T,
    out: &mut [T],
    probs: &mut alloc::vec::Vec<T>,
) {
    let width = q.len();
    let d = width / heads;
    let m = keys.len();
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for h in 0..heads {
        let span = h * d..(h + 1) * d;
        let qh = &q[span.clone()];
        let base = probs.len();
        let mut max = T::neg_infinity();
        for key in keys {
            let s = dot(qh, &key[span.clone()]) * scale;
            if s > max {
                max = s;
            }
            probs.push(s);
        }
        let mut denom = T::zero();
        for p in probs[base..].iter_mut() {
            *p = (*p - max).exp();
            denom += *p;
        }
        let oh = &mut out[span.clone()];
        for (j, p) in probs[base..base + m].iter_mut().enumerate() {
            *p /= denom;
            let vh = &values[j][span.clone()];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += *p * v;
            }
        }
    }
}
