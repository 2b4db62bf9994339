//! Back ends of the `cost`, `mask-dump` and `decode-sim` commands.

use std::io::Write;

use attamba_core::chunking::{ChunkPlan, Strategy};
use attamba_core::cost::{
    attamba_cost, iso_table, solve_iso_activation, solve_iso_flops, solve_iso_kv, transformer_cost, CostInputs,
    CostReport, IsoSolution,
};
use attamba_core::decode::{cache_report, decode_step, prefill, KvCache};
use attamba_core::masks::train_mask;
use attamba_core::model::{lm_forward, ForwardOptions, ModelConfig, ModelParams};
use attamba_core::numerics::Tensor;
use serde::Serialize;

use crate::corpus::tokenize;
use crate::error::{HarnessError, Result};
use crate::metrics::write_jsonl;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostSummary {
    pub inputs: CostInputs,
    pub attamba: CostReport,
    /// Transformer with attention width E.
    pub full_attention: CostReport,
    pub iso_kv: IsoSolution,
    pub iso_flops: IsoSolution,
    pub iso_activation: Option<IsoSolution>,
}

pub fn cost_summary(c: &CostInputs) -> Result<CostSummary> {
    c.validate()?;
    let args = (c.dim, c.chunk, c.state_dim, c.seq_len, c.heads);
    Ok(CostSummary {
        inputs: *c,
        attamba: attamba_cost(c),
        full_attention: transformer_cost(c.dim, c.seq_len, c.batch, c.heads),
        iso_kv: solve_iso_kv(args.0, args.1, args.2, args.3, args.4),
        iso_flops: solve_iso_flops(args.0, args.1, args.2, args.3, args.4),
        iso_activation: solve_iso_activation(args.0, args.1, args.2, args.3, args.4),
    })
}

/// Iso-baseline widths per chunk size as CSV with a header row.
pub fn iso_sweep_csv(out: impl Write, c: &CostInputs, chunks: &[u64]) -> Result<()> {
    c.validate()?;
    if chunks.contains(&0) {
        return Err(HarnessError::Usage("chunk sizes must be positive".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "chunk",
        "iso_kv_raw",
        "iso_kv",
        "iso_flops_raw",
        "iso_flops",
        "iso_activation_raw",
        "iso_activation",
    ])?;
    for row in iso_table(c.dim, c.state_dim, c.seq_len, c.heads, chunks) {
        let (act_raw, act) = match row.iso_activation {
            Some(s) => (s.raw.to_string(), s.dim.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            row.chunk.to_string(),
            row.iso_kv.raw.to_string(),
            row.iso_kv.dim.to_string(),
            row.iso_flops.raw.to_string(),
            row.iso_flops.dim.to_string(),
            act_raw,
            act,
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A boundary plan and one layer's training mask.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskDump {
    pub n: usize,
    pub chunk: usize,
    pub strategy: Strategy,
    pub seed: Option<u64>,
    pub lead: usize,
    pub layer: usize,
    /// Per-layer boundary arrays for layers `0..=layer`.
    pub boundaries: Vec<Vec<usize>>,
    /// One string per query row: `#` allowed, `.` masked.
    pub mask: Vec<String>,
}

impl MaskDump {
    pub fn grid(&self) -> String {
        self.mask.iter().map(|r| format!("{r}\n")).collect()
    }
}

pub fn mask_dump(n: usize, chunk: usize, strategy: Strategy, layer: usize, lead: usize, seed: u64) -> Result<MaskDump> {
    if n == 0 || chunk == 0 || lead == 0 {
        return Err(HarnessError::Usage("n, chunk and lead must be positive".into()));
    }
    let layers = layer + 1;
    let plan = match strategy {
        Strategy::Uniform => ChunkPlan::uniform(n, chunk, layers),
        Strategy::Cyclic => ChunkPlan::cyclic(n, chunk, layers),
        Strategy::Random => ChunkPlan::random(n, chunk, layers, seed),
        Strategy::Fattn | Strategy::Fssm => {
            return Err(HarnessError::Usage(format!(
                "{} boundaries come from a model's attention; use uniform, cyclic or random",
                strategy.name()
            )))
        }
    };
    let mask = train_mask(&plan, layer, lead)?;
    Ok(MaskDump {
        n,
        chunk,
        strategy,
        seed: plan.seed,
        lead,
        layer,
        boundaries: plan.boundaries.clone(),
        mask: mask.render().lines().map(String::from).collect(),
    })
}

/// One decoding step of `decode-sim`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeRecord {
    pub pos: usize,
    pub entries: usize,
    pub bytes: usize,
    pub top_token: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSimReport {
    pub records: Vec<DecodeRecord>,
    /// Tokens read and generated, in order.
    pub tokens: Vec<usize>,
    /// Largest logit gap to the full forward, when verified.
    pub max_deviation: Option<f32>,
}

fn argmax(xs: &[f32]) -> usize {
    xs.iter().enumerate().fold(0, |best, (i, &v)| if v > xs[best] { i } else { best })
}

/// Prefills on the first prompt byte, feeds the rest of the prompt one token
/// at a time, then greedily generates `generate` tokens, writing one JSONL
/// record per step. `verify` compares every step with a full forward.
pub fn decode_sim(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<f32>>,
    prompt: &[u8],
    generate: usize,
    verify: bool,
    mut out: impl Write,
) -> Result<DecodeSimReport> {
    let prompt = tokenize(prompt);
    if prompt.is_empty() {
        return Err(HarnessError::Usage("the prompt is empty".into()));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t >= cfg.vocab) {
        return Err(HarnessError::Config(format!("prompt byte {t} is outside the vocabulary of {}", cfg.vocab)));
    }
    let total = prompt.len() + generate;
    let opts = ForwardOptions {
        plan: (cfg.strategy == Strategy::Random).then(|| ChunkPlan::random(total, cfg.chunk, cfg.layers, cfg.seed)),
        ..Default::default()
    };
    let (mut logits, mut cache) = prefill(cfg, params, &prompt[..1], &opts)?;
    let mut tokens = vec![prompt[0]];
    let mut step_logits = vec![logits.clone()];
    let mut records = Vec::with_capacity(total);
    let mut record = |pos: usize, logits: &[f32], cache: &KvCache<f32>| -> Result<()> {
        let r = cache_report(cache);
        let rec = DecodeRecord { pos, entries: r.entries, bytes: r.bytes, top_token: argmax(logits) };
        write_jsonl(&mut out, &rec)?;
        records.push(rec);
        Ok(())
    };
    record(0, &logits, &cache)?;
    for pos in 1..total {
        let next = if pos < prompt.len() { prompt[pos] } else { argmax(&logits) };
        logits = decode_step(cfg, params, &mut cache, next)?;
        tokens.push(next);
        record(pos, &logits, &cache)?;
        if verify {
            step_logits.push(logits.clone());
        }
    }
    let max_deviation = if verify {
        let full = lm_forward(cfg, params, &tokens, &opts)?;
        let dev = step_logits
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().zip(full.row(t)).map(|(a, b)| (a - b).abs()))
            .fold(0.0f32, f32::max);
        Some(dev)
    } else {
        None
    };
    Ok(DecodeSimReport { records, tokens, max_deviation })
}
