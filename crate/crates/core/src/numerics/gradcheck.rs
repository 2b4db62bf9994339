use alloc::format;
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Worst relative error between tape and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst error for each parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub max: f64,
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `f` builds a scalar on a fresh tape from the registered parameters. The
/// relative error of one entry is `|g - g_fd| / max(|g|, |g_fd|, 1e-8)`.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item().to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut worst = 0.0f64;
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + T::lit(eps);
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - T::lit(eps);
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let g = analytic.map_or(0.0, |t| t.data()[e].to_f64().unwrap());
            let denom = g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((g - fd).abs() / denom);
        }
        per_param.push(worst);
    }
    let max = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { per_param, max })
}
