//! Metrics records and their JSONL stream.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Optimizer updates completed.
    pub step: usize,
    /// Mean training loss over the steps since the previous record; at step 0
    /// the loss of the first batch before any update. Absent for standalone
    /// evaluations.
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    /// `exp(eval_loss)`.
    pub perplexity: f64,
    pub tokens_seen: u64,
    /// Seconds since the run started.
    pub wall_time: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, train_loss: Option<f64>, eval_loss: f64, tokens_seen: u64, wall_time: f64) -> Self {
        Self { step, train_loss, eval_loss, perplexity: eval_loss.exp(), tokens_seen, wall_time }
    }
}

/// Writes one JSON object per line, flushing after each.
pub fn write_jsonl(out: &mut impl Write, record: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(serde_json::Error::io)?;
    Ok(())
}
