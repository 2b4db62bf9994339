//! Analytic FLOP, KV-cache and activation accounting, and the solvers that
//! size a transformer baseline to match an Attamba model.
//!
//! FLOP counts use 2 per multiply-add. Constants such as softmax and
//! normalization are ignored, as in the closed forms being modelled.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::{lm_forward_tape, ForwardOptions, Mode, ModelConfig, ModelParams};
use crate::numerics::{FlopCounts, Scalar, Tape, Tensor};
use crate::ssm::ssm_param_count;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostInputs {
    pub batch: u64,
    pub seq_len: u64,
    /// Attamba model dimension E.
    pub dim: u64,
    pub heads: u64,
    pub chunk: u64,
    pub state_dim: u64,
}

impl CostInputs {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq_len == 0 || self.dim == 0 || self.heads == 0 || self.chunk == 0 {
            return Err(Error::Config("cost inputs must be positive".into()));
        }
        Ok(())
    }
}

/// Costs of one forward pass. `total_flops` is the sum of the three flop
/// components; memory figures are element counts with f32 byte equivalents.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    pub proj_flops: f64,
    pub ssm_flops: f64,
    pub attn_flops: f64,
    pub total_flops: f64,
    pub kv_elements: f64,
    pub kv_bytes: f64,
    pub activation_elements: f64,
    pub activation_bytes: f64,
}

impl CostReport {
    fn new(proj: f64, ssm: f64, attn: f64, kv: f64, act: f64) -> Self {
        Self {
            proj_flops: proj,
            ssm_flops: ssm,
            attn_flops: attn,
            total_flops: proj + ssm + attn,
            kv_elements: kv,
            kv_bytes: 4.0 * kv,
            activation_elements: act,
            activation_bytes: 4.0 * act,
        }
    }
}

/// `2BLE² + 2BL(E/H·(5H·D_S + D_S) + 21·D_S) + 4BL²E/P`, KV `2BLE/P + 2B·D_S`,
/// activations `2BLE(1 + 1/P) + 2B·D_S + BL²H/P`.
pub fn attamba_cost(c: &CostInputs) -> CostReport {
    let (b, l, e, h, p, ds) = floats(c);
    CostReport::new(
        2.0 * b * l * e * e,
        2.0 * b * l * ssm_width_term(e, h, ds),
        4.0 * b * l * l * e / p,
        2.0 * b * l * e / p + 2.0 * b * ds,
        2.0 * b * l * e * (1.0 + 1.0 / p) + 2.0 * b * ds + b * l * l * h / p,
    )
}

/// `6BLF² + 4BL²F`, KV `2BLF`, activations `4BLF + BL²H`.
pub fn transformer_cost(f: u64, seq_len: u64, batch: u64, heads: u64) -> CostReport {
    let (f, l, b, h) = (f as f64, seq_len as f64, batch as f64, heads as f64);
    CostReport::new(6.0 * b * l * f * f, 0.0, 4.0 * b * l * l * f, 2.0 * b * l * f, 4.0 * b * l * f + b * l * l * h)
}

fn floats(c: &CostInputs) -> (f64, f64, f64, f64, f64, f64) {
    (c.batch as f64, c.seq_len as f64, c.dim as f64, c.heads as f64, c.chunk as f64, c.state_dim as f64)
}

fn ssm_width_term(e: f64, h: f64, ds: f64) -> f64 {
    e / h * (5.0 * h * ds + ds) + 21.0 * ds
}

/// A baseline attention dimension: the exact solution and the width used.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IsoSolution {
    pub raw: f64,
    /// `raw` snapped to a multiple of the head count.
    pub dim: u64,
}

fn nearest_multiple(x: f64, m: u64) -> u64 {
    (Float::round(x / m as f64) as u64 * m).max(m)
}

/// Matches KV-cache size: `2BLF = 2BLE/P + 2B·D_S`, rounded down to a
/// multiple of `heads`.
pub fn solve_iso_kv(dim: u64, chunk: u64, state_dim: u64, seq_len: u64, heads: u64) -> IsoSolution {
    let raw = dim as f64 / chunk as f64 + state_dim as f64 / seq_len as f64;
    IsoSolution { raw, dim: Float::floor(raw / heads as f64) as u64 * heads }
}

/// `R` of the iso-FLOPs quadratic `3F² + 2LF − R = 0`.
pub fn iso_flops_rhs(dim: u64, chunk: u64, state_dim: u64, seq_len: u64, heads: u64) -> f64 {
    let (e, p, ds, l, h) = (dim as f64, chunk as f64, state_dim as f64, seq_len as f64, heads as f64);
    e * e + ssm_width_term(e, h, ds) + 2.0 * l * e / p
}

/// Matches forward FLOPs; the positive root is rounded to the nearest
/// multiple of `heads`.
pub fn solve_iso_flops(dim: u64, chunk: u64, state_dim: u64, seq_len: u64, heads: u64) -> IsoSolution {
    let r = iso_flops_rhs(dim, chunk, state_dim, seq_len, heads);
    let l = seq_len as f64;
    // Stable form of (−2L + √(4L² + 12R)) / 6.
    let raw = 2.0 * r / (2.0 * l + Float::sqrt(4.0 * l * l + 12.0 * r));
    IsoSolution { raw, dim: nearest_multiple(raw, heads) }
}

/// Matches activation memory:
/// `4BLF = 2BLE(1 + 1/P) + 2B·D_S + BL²H(1/P − 1)`.
///
/// `None` when the required width is not positive, which happens once the
/// attention-map savings outgrow the whole transformer budget.
pub fn solve_iso_activation(dim: u64, chunk: u64, state_dim: u64, seq_len: u64, heads: u64) -> Option<IsoSolution> {
    let (e, p, ds, l, h) = (dim as f64, chunk as f64, state_dim as f64, seq_len as f64, heads as f64);
    let raw = (2.0 * l * e * (1.0 + 1.0 / p) + 2.0 * ds + l * l * h * (1.0 / p - 1.0)) / (4.0 * l);
    (raw > 0.0).then(|| IsoSolution { raw, dim: nearest_multiple(raw, heads) })
}

/// Trainable parameters implied by `cfg`, counted from the architecture
/// rather than from allocated tensors.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let e = cfg.dim;
    let ffn = e + 2 * e * cfg.ffn_hidden();
    let block = match cfg.mode {
        Mode::Attamba | Mode::PseudoChunk => e + 2 * e * e + 2 * ssm_param_count(e, cfg.state_dim),
        _ => e + 4 * e * cfg.attn_dim(),
    };
    cfg.vocab * e + e + cfg.layers * (block + ffn)
}

/// Multiply-adds recorded by the transformer blocks of one forward pass over
/// `batch`, excluding the embedding and output head.
pub fn empirical_flop_counter<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<T>>,
    batch: &[&[usize]],
    opts: &ForwardOptions,
) -> Result<FlopCounts> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let trace = lm_forward_tape(&mut tape, cfg, &vars, batch, opts)?;
    Ok(trace.block_flops)
}

/// Iso-baseline widths for each chunk size in `chunks`.
pub fn iso_table(dim: u64, state_dim: u64, seq_len: u64, heads: u64, chunks: &[u64]) -> Vec<IsoRow> {
    chunks
        .iter()
        .map(|&p| IsoRow {
            chunk: p,
            iso_kv: solve_iso_kv(dim, p, state_dim, seq_len, heads),
            iso_flops: solve_iso_flops(dim, p, state_dim, seq_len, heads),
            iso_activation: solve_iso_activation(dim, p, state_dim, seq_len, heads),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IsoRow {
    pub chunk: u64,
    pub iso_kv: IsoSolution,
    pub iso_flops: IsoSolution,
    pub iso_activation: Option<IsoSolution>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_inputs(p: u64) -> CostInputs {
        CostInputs { batch: 1, seq_len: 4096, dim: 512, heads: 8, chunk: p, state_dim: 32 }
    }

    #[test]
    fn attamba_flops_term_by_term() {
        let r = attamba_cost(&table_inputs(4));
        // Hand sum: 512² + 64·1312 + 672 + 2·4096·128 = 1,395,360.
        assert_eq!(iso_flops_rhs(512, 4, 32, 4096, 8), 1_395_360.0);
        assert_eq!(r.total_flops, 2.0 * 4096.0 * 1_395_360.0);
        assert_eq!(r.total_flops, r.proj_flops + r.ssm_flops + r.attn_flops);
    }

    #[test]
    fn attention_term_scales_with_chunk() {
        let a = attamba_cost(&CostInputs { chunk: 1, ..table_inputs(1) });
        let t = transformer_cost(512, 4096, 1, 8);
        assert_eq!(a.attn_flops, t.attn_flops);
        let a4 = attamba_cost(&table_inputs(4));
        assert_eq!(a4.attn_flops * 4.0, a.attn_flops);
        let huge = attamba_cost(&table_inputs(u64::MAX));
        assert!(huge.attn_flops < 1e-6);
        let t2 = transformer_cost(512, 8192, 1, 8);
        assert_eq!(t2.attn_flops, 4.0 * t.attn_flops);
    }

    #[test]
    fn iso_kv_examples() {
        assert_eq!(solve_iso_kv(512, 4, 32, 4096, 8).dim, 128);
        assert_eq!(solve_iso_kv(512, 8, 32, 4096, 8).dim, 64);
        assert_eq!(solve_iso_kv(512, 1, 0, 4096, 8).dim, 512);
    }

    #[test]
    fn iso_flops_roots() {
        for (p, expect) in [(4, 160), (8, 104)] {
            let s = solve_iso_flops(512, p, 32, 4096, 8);
            assert_eq!(s.dim, expect);
            let quad = 3.0 * s.raw * s.raw + 2.0 * 4096.0 * s.raw;
            let r = iso_flops_rhs(512, p, 32, 4096, 8);
            assert!(((quad - r) / r).abs() < 1e-12);
        }
        let s = solve_iso_flops(512, 4, 32, 4096, 8);
        assert!((s.raw - 160.86).abs() < 0.01);
        // Substituting the rounded width lands close to the Attamba budget.
        let lhs = transformer_cost(160, 4096, 1, 8).total_flops;
        let rhs = attamba_cost(&table_inputs(4)).total_flops;
        assert!((lhs / rhs - 1.0).abs() < 0.02);
    }

    #[test]
    fn iso_activation_feasibility() {
        assert!(solve_iso_activation(512, 4, 32, 4096, 8).is_none());
        let one = solve_iso_activation(512, 1, 32, 4096, 8).unwrap();
        assert!((one.raw - (512.0 + 32.0 / 8192.0)).abs() < 1e-9);
        let flip = (1..1000).find(|&l| solve_iso_activation(64, 4, 16, l, 2).is_none());
        assert_eq!(flip, Some(107));
    }

    #[test]
    fn widths_shrink_with_chunk_size() {
        let mut last = (f64::INFINITY, f64::INFINITY);
        for p in 1..=32 {
            let kv = solve_iso_kv(512, p, 32, 4096, 8).raw;
            let fl = solve_iso_flops(512, p, 32, 4096, 8).raw;
            assert!(kv < last.0 && fl < last.1);
            last = (kv, fl);
        }
    }
}
