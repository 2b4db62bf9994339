//! Incremental decoding with a compressed KV-cache.
//!
//! Each Attamba layer keeps the SSM outputs of completed chunks' boundary
//! tokens, a window of recent uncompressed outputs, and the two SSM
//! recurrent states. After every token, window entries that the next query
//! can no longer see uncompressed (outside both the lead recency and the
//! pending segment) leave the window; boundaries among them are promoted to
//! the compressed list and the rest are dropped. The keys a query attends to
//! are therefore exactly those the training mask allows.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::chunking::{BoundaryRule, ChunkPlan, Strategy};
use crate::error::{Error, Result};
use crate::model::{lm_forward_tape, Block, ForwardOptions, Mode, ModelConfig, ModelParams};
use crate::numerics::kernels::{attend_query, gelu, rmsnorm_row};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::ssm::{ssm_scan_with_state, ssm_step, SsmState};

#[derive(Clone, Debug, PartialEq)]
pub struct WindowEntry<T> {
    pub pos: usize,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub is_boundary: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<T> {
    /// Compressed keys/values of boundaries no longer in the window.
    pub boundary_keys: Vec<Vec<T>>,
    pub boundary_values: Vec<Vec<T>>,
    pub boundary_positions: Vec<usize>,
    /// Contiguous run of the most recent positions.
    pub window: VecDeque<WindowEntry<T>>,
    pub state_k: SsmState<T>,
    pub state_v: SsmState<T>,
    /// Start of the segment holding the latest position.
    pub segment_start: usize,
    pub rule: BoundaryRule,
}

impl<T: Scalar> LayerCache<T> {
    fn new(dim: usize, state_dim: usize, rule: BoundaryRule) -> Self {
        Self {
            boundary_keys: Vec::new(),
            boundary_values: Vec::new(),
            boundary_positions: Vec::new(),
            window: VecDeque::new(),
            state_k: SsmState::zeros(dim, state_dim),
            state_v: SsmState::zeros(dim, state_dim),
            segment_start: 0,
            rule,
        }
    }

    pub fn entries(&self) -> usize {
        self.boundary_keys.len() + self.window.len()
    }

    /// Appends the outputs at `pos` (whose segment began at `segment_start`).
    fn push(&mut self, pos: usize, key: Vec<T>, value: Vec<T>) -> Result<()> {
        let is_boundary = self.rule.is_boundary(pos)?;
        self.window.push_back(WindowEntry { pos, key, value, is_boundary });
        Ok(())
    }

    /// Drops or promotes entries the query at `next` sees only compressed.
    fn evict(&mut self, next: usize, lead: usize) -> Result<()> {
        let last = next - 1;
        let next_segment = if self.rule.is_boundary(last)? { next } else { self.segment_start };
        while let Some(front) = self.window.front() {
            if front.pos >= next_segment || next - front.pos < lead {
                break;
            }
            let e = self.window.pop_front().unwrap();
            if e.is_boundary {
                self.boundary_keys.push(e.key);
                self.boundary_values.push(e.value);
                self.boundary_positions.push(e.pos);
            }
        }
        Ok(())
    }
}

/// Decoding state for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    pub layers: Vec<LayerCache<T>>,
    /// Next absolute position.
    pub pos: usize,
    pub lead: usize,
    pub dim: usize,
    pub state_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CacheReport {
    pub entries_per_layer: Vec<usize>,
    pub entries: usize,
    pub bytes: usize,
}

/// Entry counts and bytes: per layer, `2·entries·E` key/value scalars plus
/// the two `E×D_S` SSM states, at the cache's scalar width.
pub fn cache_report<T: Scalar>(cache: &KvCache<T>) -> CacheReport {
    let per: Vec<usize> = cache.layers.iter().map(LayerCache::entries).collect();
    let (e, ds) = (cache.dim, cache.state_dim);
    let bytes = per.iter().map(|&n| 2 * n * e * T::BYTES + 2 * e * ds * T::BYTES).sum();
    CacheReport { entries: per.iter().sum(), entries_per_layer: per, bytes }
}

/// Decode settings resolved from the config and options.
fn decode_plan(cfg: &ModelConfig, n: usize, opts: &ForwardOptions) -> Result<(ChunkPlan, usize)> {
    let lead = match cfg.mode {
        Mode::Attamba => opts.lead.unwrap_or(cfg.lead),
        Mode::PseudoChunk => usize::MAX,
        m => return Err(Error::Unsupported(format!("compressed decoding needs an SSM mode, not {}", m.name()))),
    };
    if lead == 0 {
        return Err(Error::Contract("lead must be at least 1".into()));
    }
    let plan = match &opts.plan {
        Some(p) => p.clone(),
        None => match cfg.strategy {
            Strategy::Uniform => ChunkPlan::uniform(n, cfg.chunk, cfg.layers),
            Strategy::Cyclic => ChunkPlan::cyclic(n, cfg.chunk, cfg.layers),
            Strategy::Random => ChunkPlan::random(cfg.seq_len.max(n), cfg.chunk, cfg.layers, cfg.seed),
            s => s_unsupported(s)?,
        },
    };
    if matches!(plan.strategy, Strategy::Fattn | Strategy::Fssm) {
        s_unsupported(plan.strategy)?;
    }
    Ok((plan, lead))
}

fn s_unsupported(s: Strategy) -> Result<ChunkPlan> {
    Err(Error::Unsupported(format!(
        "{} boundaries depend on a full attention map and cannot be decoded incrementally",
        s.name()
    )))
}

/// Runs the full forward over `tokens` and extracts a cache positioned
/// after the last token. Returns the last position's logits.
///
/// The default plan for random boundaries spans `max(seq_len, len)`
/// positions; decoding beyond a plan's horizon is an error.
pub fn prefill<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<T>>,
    tokens: &[usize],
    opts: &ForwardOptions,
) -> Result<(Vec<T>, KvCache<T>)> {
    if tokens.is_empty() {
        return Err(Error::Contract("prefill needs at least one token".into()));
    }
    let n = tokens.len();
    let (plan, lead) = decode_plan(cfg, n, opts)?;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let fwd = ForwardOptions { plan: Some(plan.clone()), lead: Some(lead.min(n)), ..opts.clone() };
    let trace = lm_forward_tape(&mut tape, cfg, &vars, &[tokens], &fwd)?;

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, lt) in trace.layers.iter().enumerate() {
        let Block::Attamba(block) = &params.blocks[l] else {
            return Err(Error::Unsupported("baseline block in an SSM model".into()));
        };
        let mut lc = LayerCache::new(cfg.dim, cfg.state_dim, plan.rule(l));
        let (keys, values) = (tape.value(lt.keys), tape.value(lt.values));
        for pos in 0..n {
            if pos == 0 || lc.rule.is_boundary(pos - 1)? {
                lc.segment_start = pos;
            }
            lc.push(pos, keys.row(pos).to_vec(), values.row(pos).to_vec())?;
            lc.evict(pos + 1, lead)?;
        }
        // Recurrent states over the open segment.
        let input = tape.value(lt.input);
        let s = lc.segment_start;
        let mut normed = Vec::with_capacity((n - s) * cfg.dim);
        let mut row = vec![T::zero(); cfg.dim];
        for pos in s..n {
            rmsnorm_row(input.row(pos), block.norm.data(), &mut row);
            normed.extend_from_slice(&row);
        }
        let normed = Tensor::new(&[n - s, cfg.dim], normed)?;
        let mut resets = vec![false; n - s];
        resets[0] = true;
        lc.state_k = ssm_scan_with_state(&block.ssm_k, &normed, &resets)?.1;
        lc.state_v = ssm_scan_with_state(&block.ssm_v, &normed, &resets)?.1;
        layers.push(lc);
    }
    let logits = tape.value(trace.logits).row(n - 1).to_vec();
    let cache = KvCache { layers, pos: n, lead, dim: cfg.dim, state_dim: cfg.state_dim };
    Ok((logits, cache))
}

/// `x · W` for a row vector.
fn vecmat<T: Scalar>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![T::zero(); n];
    T::gemm(1, k, n, x, (k, 1), w.data(), (n, 1), T::zero(), &mut out);
    out
}

fn add_into<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Feeds one token and returns the next-token logits.
pub fn decode_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<T>>,
    cache: &mut KvCache<T>,
    token: usize,
) -> Result<Vec<T>> {
    if token >= cfg.vocab {
        return Err(Error::Index { what: "vocabulary", index: token, len: cfg.vocab });
    }
    if cache.layers.len() != params.blocks.len() || cache.dim != cfg.dim {
        return Err(Error::Contract("cache does not match the model".into()));
    }
    let pos = cache.pos;
    let e = cfg.dim;
    let scale = T::one() / T::from_usize(e / cfg.heads).unwrap().sqrt();
    let mut x = params.embedding.row(token).to_vec();
    let mut h = vec![T::zero(); e];
    let mut probs = Vec::new();
    let mut attn = vec![T::zero(); e];
    for (block, lc) in params.blocks.iter().zip(cache.layers.iter_mut()) {
        let Block::Attamba(b) = block else {
            return Err(Error::Unsupported("baseline block in an SSM model".into()));
        };
        let reset = pos == 0 || lc.rule.is_boundary(pos - 1)?;
        if reset {
            lc.segment_start = pos;
        }
        rmsnorm_row(&x, b.norm.data(), &mut h);
        let q = vecmat(&h, &b.w_q);
        let (k, sk) = ssm_step(&b.ssm_k, &lc.state_k, &h, reset)?;
        let (v, sv) = ssm_step(&b.ssm_v, &lc.state_v, &h, reset)?;
        lc.state_k = sk;
        lc.state_v = sv;
        lc.push(pos, k, v)?;

        let keys: Vec<&[T]> =
            lc.boundary_keys.iter().map(Vec::as_slice).chain(lc.window.iter().map(|w| w.key.as_slice())).collect();
        let values: Vec<&[T]> =
            lc.boundary_values.iter().map(Vec::as_slice).chain(lc.window.iter().map(|w| w.value.as_slice())).collect();
        probs.clear();
        attend_query(&q, &keys, &values, cfg.heads, scale, &mut attn, &mut probs);
        add_into(&mut x, &vecmat(&attn, &b.w_o));

        rmsnorm_row(&x, b.ffn.norm.data(), &mut h);
        let hidden: Vec<T> = vecmat(&h, &b.ffn.w_in).into_iter().map(gelu).collect();
        add_into(&mut x, &vecmat(&hidden, &b.ffn.w_out));
        lc.evict(pos + 1, cache.lead)?;
    }
    rmsnorm_row(&x, params.final_norm.data(), &mut h);
    let logits: Vec<T> = (0..cfg.vocab).map(|t| crate::numerics::kernels::dot(&h, params.embedding.row(t))).collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits at position {pos}")));
    }
    cache.pos += 1;
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn cfg(chunk: usize, lead: usize, strategy: Strategy) -> ModelConfig {
        ModelConfig {
            vocab: 20,
            seq_len: 24,
            dim: 8,
            heads: 2,
            layers: 2,
            chunk,
            lead,
            state_dim: 3,
            strategy,
            ..Default::default()
        }
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn steps_reproduce_full_forward() {
        let tokens: Vec<usize> = (0..24).map(|i| (i * 7 + 3) % 20).collect();
        for strategy in [Strategy::Uniform, Strategy::Cyclic, Strategy::Random] {
            for (p, lead) in [(2, 1), (4, 4), (4, 2), (3, 5)] {
                let c = cfg(p, lead, strategy);
                let params = init_params::<f64>(&c, 1).unwrap();
                let opts = ForwardOptions::default();
                let plan = decode_plan(&c, 24, &opts).unwrap().0;
                let full_opts = ForwardOptions { plan: Some(plan), ..Default::default() };
                let full = crate::model::lm_forward(&c, &params, &tokens, &full_opts).unwrap();
                let (first, mut cache) = prefill(&c, &params, &tokens[..5], &opts).unwrap();
                assert!(max_diff(&first, full.row(4)) < 1e-12);
                for t in 5..24 {
                    let logits = decode_step(&c, &params, &mut cache, tokens[t]).unwrap();
                    let d = max_diff(&logits, full.row(t));
                    assert!(d < 1e-10, "{} P={p} lead={lead} t={t}: {d}", strategy.name());
                }
            }
        }
    }

    #[test]
    fn single_token_prefill() {
        let c = cfg(4, 4, Strategy::Uniform);
        let params = init_params::<f32>(&c, 0).unwrap();
        let (_, cache) = prefill(&c, &params, &[3], &ForwardOptions::default()).unwrap();
        for lc in &cache.layers {
            assert!(lc.boundary_keys.is_empty());
            let window: Vec<_> = lc.window.iter().map(|w| w.pos).collect();
            assert_eq!(window, [0]);
        }
    }

    #[test]
    fn closed_chunk_stays_in_window_until_lead_expires() {
        let c = cfg(4, 2, Strategy::Uniform);
        let params = init_params::<f32>(&c, 0).unwrap();
        let (_, cache) = prefill(&c, &params, &[1; 8], &ForwardOptions::default()).unwrap();
        let lc = &cache.layers[0];
        assert_eq!(lc.boundary_positions, [3]);
        let window: Vec<_> = lc.window.iter().map(|w| w.pos).collect();
        assert_eq!(window, [7]);
    }

    #[test]
    fn report_counts_entries_and_bytes() {
        let c = ModelConfig { layers: 1, ..cfg(8, 8, Strategy::Uniform) };
        let params = init_params::<f32>(&c, 0).unwrap();
        let (_, mut cache) = prefill(&c, &params, &[2; 40], &ForwardOptions::default()).unwrap();
        let r = cache_report(&cache);
        // Boundaries 7..=31 compressed; positions 33..=39 in the window.
        assert_eq!(r.entries, 4 + 7);
        assert_eq!(r.bytes, 2 * 11 * 8 * 4 + 2 * 8 * 3 * 4);
        let before = r.entries;
        let mut counts = Vec::new();
        for _ in 0..24 {
            decode_step(&c, &params, &mut cache, 1).unwrap();
            counts.push(cache_report(&cache).entries);
        }
        // One promotion per chunk of steps, at a fixed phase.
        assert_eq!(counts[7], before + 1);
        assert_eq!(counts[15], before + 2);
        assert_eq!(counts[23], before + 3);
        assert!(counts.windows(2).all(|w| w[1] - w[0] <= 1));
    }

    #[test]
    fn unsupported_configurations() {
        let params = init_params::<f32>(&cfg(4, 4, Strategy::Fattn), 0).unwrap();
        assert!(prefill(&cfg(4, 4, Strategy::Fattn), &params, &[1], &ForwardOptions::default()).is_err());
        let base = ModelConfig { mode: Mode::BaselineFull, ..cfg(4, 4, Strategy::Uniform) };
        let bp = init_params::<f32>(&base, 0).unwrap();
        assert!(prefill(&base, &bp, &[1], &ForwardOptions::default()).is_err());
        assert!(prefill(&cfg(4, 4, Strategy::Uniform), &params, &[], &ForwardOptions::default()).is_err());
    }
}
