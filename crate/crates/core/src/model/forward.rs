use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{Mode, ModelConfig};
use super::params::{AttambaBlock, BaselineBlock, Block, Ffn, ModelParams};
use crate::chunking::{chunk_mass, fattn_plan, fssm_plan, received_mass, uniform_plan, ChunkPlan, Strategy};
use crate::error::{Error, Result};
use crate::masks::{causal_mask, sliding_window_mask, train_mask, MaskMatrix};
use crate::numerics::{FlopCounts, KeyLists, Scalar, Tape, Tensor, Var};
use crate::ssm::resets_from_plan;

/// Overrides applied on top of a [`ModelConfig`] for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Boundary plan shared by every sequence. When absent the plan follows
    /// `cfg.strategy`; plans longer than the sequence are truncated.
    pub plan: Option<ChunkPlan>,
    /// Sliding attention window for baseline blocks.
    pub window: Option<usize>,
    /// Replaces `cfg.lead` for Attamba blocks.
    pub lead: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub input: Var,
    /// Key sequence: SSM_K output, or the key projection for baselines.
    pub keys: Var,
    pub values: Var,
    /// The attention node; see [`Tape::attention_probs`].
    pub attn: Var,
    pub output: Var,
    /// Tape length when the layer began, for locating failures.
    pub tape_start: usize,
}

#[derive(Clone, Debug)]
pub struct LmTrace {
    /// `[B·n, V]`
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
    /// Boundary plan used for each sequence.
    pub plans: Vec<ChunkPlan>,
    /// Multiply-adds of the blocks alone (no embedding or output head).
    pub block_flops: FlopCounts,
}

impl LmTrace {
    /// Layer whose operations include tape node `index`, if any.
    pub fn layer_of_node(&self, index: usize) -> Option<usize> {
        self.layers.iter().rposition(|l| l.tape_start <= index)
    }
}

/// Per-layer visibility for a batch of equal-length sequences laid end to end.
struct Visibility {
    keys: KeyLists,
    resets: Vec<bool>,
}

fn batch_visibility(masks: &[MaskMatrix], resets: &[Vec<bool>]) -> Result<Visibility> {
    let n = masks[0].n_q();
    let total = n * masks.len();
    let mut rows = Vec::with_capacity(total);
    for (b, m) in masks.iter().enumerate() {
        for i in 0..n {
            rows.push(m.row_indices(i).into_iter().map(|j| j + b * n).collect());
        }
    }
    Ok(Visibility { keys: KeyLists::new(rows, total)?, resets: resets.concat() })
}

fn ffn_forward<T: Scalar>(tape: &mut Tape<T>, ffn: &Ffn<Var>, x: Var) -> Result<Var> {
    let h = tape.rmsnorm(x, ffn.norm)?;
    let h = tape.matmul(h, ffn.w_in)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, ffn.w_out)?;
    tape.add(x, h)
}

struct BlockOut {
    keys: Var,
    values: Var,
    attn: Var,
    output: Var,
}

fn attamba_block<T: Scalar>(
    tape: &mut Tape<T>,
    block: &AttambaBlock<Var>,
    x: Var,
    heads: usize,
    vis: &Visibility,
) -> Result<BlockOut> {
    let h = tape.rmsnorm(x, block.norm)?;
    let q = tape.matmul(h, block.w_q)?;
    let k = tape.ssm_scan(&block.ssm_k, h, &vis.resets)?;
    let v = tape.ssm_scan(&block.ssm_v, h, &vis.resets)?;
    let attn = tape.attention(q, k, v, heads, &vis.keys)?;
    let o = tape.matmul(attn, block.w_o)?;
    let x = tape.add(x, o)?;
    let output = ffn_forward(tape, &block.ffn, x)?;
    Ok(BlockOut { keys: k, values: v, attn, output })
}

fn baseline_block<T: Scalar>(
    tape: &mut Tape<T>,
    block: &BaselineBlock<Var>,
    x: Var,
    heads: usize,
    keys: &KeyLists,
) -> Result<BlockOut> {
    let h = tape.rmsnorm(x, block.norm)?;
    let q = tape.matmul(h, block.w_q)?;
    let k = tape.matmul(h, block.w_k)?;
    let v = tape.matmul(h, block.w_v)?;
    let attn = tape.attention(q, k, v, heads, keys)?;
    let o = tape.matmul(attn, block.w_o)?;
    let x = tape.add(x, o)?;
    let output = ffn_forward(tape, &block.ffn, x)?;
    Ok(BlockOut { keys: k, values: v, attn, output })
}

/// One Attamba block over a single sequence `x` (`[n, E]`).
///
/// SSM resets follow `plan` at `layer`; attention uses the chunked training
/// mask, or the plain causal mask in [`Mode::PseudoChunk`].
#[allow(clippy::too_many_arguments)]
pub fn attamba_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    block: &AttambaBlock<Var>,
    x: Var,
    heads: usize,
    plan: &ChunkPlan,
    layer: usize,
    lead: usize,
    mode: Mode,
) -> Result<Var> {
    let n = tape.value(x).rows();
    if plan.n != n {
        return Err(Error::Contract(format!("plan covers {} positions, input has {n}", plan.n)));
    }
    let mask = match mode {
        Mode::PseudoChunk => causal_mask(n),
        Mode::Attamba => train_mask(plan, layer, lead)?,
        other => return Err(Error::Config(format!("{} is not an SSM mode", other.name()))),
    };
    let vis = batch_visibility(&[mask], &[resets_from_plan(plan, layer)])?;
    Ok(attamba_block(tape, block, x, heads, &vis)?.output)
}

/// One baseline attention block over a single sequence, optionally limited
/// to a sliding window.
pub fn baseline_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    block: &BaselineBlock<Var>,
    x: Var,
    heads: usize,
    window: Option<usize>,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let keys = KeyLists::from_mask(&baseline_mask(n, window)?)?;
    Ok(baseline_block(tape, block, x, heads, &keys)?.output)
}

fn baseline_mask(n: usize, window: Option<usize>) -> Result<MaskMatrix> {
    match window {
        Some(0) => Err(Error::Contract("attention window must be at least 1".into())),
        Some(w) => Ok(sliding_window_mask(n, w)),
        None => Ok(causal_mask(n)),
    }
}

/// Plan for a sequence of length `n` before any attention has run.
fn static_plan(cfg: &ModelConfig, n: usize, opts: &ForwardOptions) -> Result<Option<ChunkPlan>> {
    if let Some(plan) = &opts.plan {
        if plan.n < n || plan.layers() != cfg.layers {
            return Err(Error::Contract(format!(
                "plan ({} positions, {} layers) does not cover {n} positions over {} layers",
                plan.n,
                plan.layers(),
                cfg.layers
            )));
        }
        return Ok(Some(plan.truncated(n)));
    }
    let (p, layers) = (cfg.chunk, cfg.layers);
    Ok(match cfg.strategy {
        Strategy::Uniform => Some(ChunkPlan::uniform(n, p, layers)),
        Strategy::Cyclic => Some(ChunkPlan::cyclic(n, p, layers)),
        Strategy::Random => Some(ChunkPlan::random(n, p, layers, cfg.seed)),
        Strategy::Fattn | Strategy::Fssm => None,
    })
}

/// Probabilities `[H, n, n]` of sequence `b` within a batched attention node.
fn sequence_probs<T: Scalar>(dense: &Tensor<T>, b: usize, n: usize) -> Tensor<T> {
    let (h, total) = (dense.shape()[0], dense.shape()[1]);
    Tensor::from_fn(&[h, n, n], |idx| {
        let (head, i, j) = (idx / (n * n), (idx / n) % n, idx % n);
        dense.data()[(head * total + b * n + i) * total + b * n + j]
    })
}

/// Plans for the data-driven strategies, derived from first-layer attention.
fn derived_plans<T: Scalar>(cfg: &ModelConfig, dense: &Tensor<T>, batch: usize, n: usize) -> Result<Vec<ChunkPlan>> {
    let p = cfg.chunk;
    let uniform = uniform_plan(n, p);
    (0..batch)
        .map(|b| {
            let probs = sequence_probs(dense, b, n);
            let later = match cfg.strategy {
                Strategy::Fattn => fattn_plan(&probs, n, p)?,
                _ => {
                    let mass = chunk_mass(&received_mass(&probs)?, &uniform);
                    fssm_plan(n, p, &mass, cfg.fssm_k(n))?
                }
            };
            let mut boundaries = vec![uniform.clone()];
            boundaries.extend((1..cfg.layers).map(|_| later.clone()));
            ChunkPlan::from_boundaries(n, p, cfg.strategy, boundaries)
        })
        .collect()
}

/// Language-model forward over a batch of equal-length token sequences,
/// laid end to end as `[B·n, ·]` rows.
///
/// For `fattn`/`fssm` without an explicit plan, layer 0 runs on uniform
/// chunks (causal attention for `fattn`, the chunked mask for `fssm`) and its
/// attention map picks the boundaries of every later layer, per sequence.
pub fn lm_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    batch: &[&[usize]],
    opts: &ForwardOptions,
) -> Result<LmTrace> {
    cfg.validate()?;
    if params.blocks.len() != cfg.layers {
        return Err(Error::Config(format!("{} blocks for a {}-layer config", params.blocks.len(), cfg.layers)));
    }
    let n = batch.first().map_or(0, |s| s.len());
    if n == 0 || batch.iter().any(|s| s.len() != n) {
        return Err(Error::Contract("batch needs non-empty sequences of equal length".into()));
    }
    let ids = batch.concat();
    let mut x = tape.embedding(params.embedding, &ids)?;

    let static_plan = if cfg.mode.is_baseline() { None } else { static_plan(cfg, n, opts)? };
    let mut plans: Vec<ChunkPlan> = static_plan.iter().cloned().cycle().take(batch.len()).collect();
    let lead = opts.lead.unwrap_or(cfg.effective_lead());
    let base_keys = if cfg.mode.is_baseline() {
        let m = baseline_mask(n, opts.window)?;
        Some(batch_visibility(&vec![m; batch.len()], &[])?.keys)
    } else {
        None
    };

    let flops_before = tape.flops();
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, block) in params.blocks.iter().enumerate() {
        let tape_start = tape.len();
        let input = x;
        let out = match (block, &base_keys) {
            (Block::Baseline(b), Some(keys)) => baseline_block(tape, b, x, cfg.attn_heads(), keys)?,
            (Block::Attamba(b), None) => {
                let vis = if plans.is_empty() {
                    // First layer of a data-driven strategy.
                    let uniform = ChunkPlan::uniform(n, cfg.chunk, 1);
                    let mask = match cfg.strategy {
                        Strategy::Fattn => causal_mask(n),
                        _ => train_mask(&uniform, 0, lead.min(n))?,
                    };
                    let resets = resets_from_plan(&uniform, 0);
                    batch_visibility(&vec![mask; batch.len()], &vec![resets; batch.len()])?
                } else {
                    let mut masks = Vec::with_capacity(plans.len());
                    for plan in &plans {
                        masks.push(match cfg.mode {
                            Mode::PseudoChunk => causal_mask(n),
                            _ => train_mask(plan, l, lead)?,
                        });
                    }
                    let resets: Vec<_> = plans.iter().map(|p| resets_from_plan(p, l)).collect();
                    batch_visibility(&masks, &resets)?
                };
                let out = attamba_block(tape, b, x, cfg.heads, &vis)?;
                if plans.is_empty() {
                    let dense = tape
                        .attention_probs(out.attn)
                        .ok_or_else(|| Error::Contract("attention node lost its probabilities".into()))?;
                    plans = derived_plans(cfg, &dense, batch.len(), n)?;
                }
                out
            }
            _ => return Err(Error::Config(format!("layer {l} does not match mode {}", cfg.mode.name()))),
        };
        x = out.output;
        layers.push(LayerTrace {
            input,
            keys: out.keys,
            values: out.values,
            attn: out.attn,
            output: out.output,
            tape_start,
        });
    }
    let block_flops = tape.flops().since(&flops_before);
    let h = tape.rmsnorm(x, params.final_norm)?;
    let logits = tape.matmul_t(h, params.embedding)?;
    Ok(LmTrace { logits, layers, plans, block_flops })
}

/// Next-token logits (`[n, V]`) for one sequence, without gradients.
pub fn lm_forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<T>>,
    tokens: &[usize],
    opts: &ForwardOptions,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let trace = lm_forward_tape(&mut tape, cfg, &vars, &[tokens], opts)?;
    Ok(tape.value(trace.logits).clone())
}

/// Mean next-token cross-entropy over windows of `n + 1` tokens each: the
/// model reads the first `n` and predicts the last `n`.
pub fn lm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    windows: &[&[usize]],
    opts: &ForwardOptions,
) -> Result<(Var, LmTrace)> {
    if windows.iter().any(|w| w.len() < 2) {
        return Err(Error::Contract("loss windows need at least two tokens".into()));
    }
    let inputs: Vec<&[usize]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
    let targets: Vec<usize> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
    let trace = lm_forward_tape(tape, cfg, params, &inputs, opts)?;
    let loss = tape.cross_entropy(trace.logits, &targets)?;
    Ok((loss, trace))
}
