use alloc::format;

use crate::chunking::Strategy;
use crate::error::{Error, Result};

/// Which attention the blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Mode {
    /// SSM keys/values, chunk-boundary mask.
    Attamba,
    /// SSM keys/values, plain causal mask.
    PseudoChunk,
    /// Standard attention with key/value projections in dimension F.
    BaselineFull,
    /// Baseline with F reduced to E/P to match the compressed cache.
    BaselineKvc,
    /// Reduced-F baseline evaluated with a sliding window of `seq_len / P`.
    BaselineKvcSwa,
}

impl Mode {
    pub const ALL: [Mode; 5] =
        [Self::Attamba, Self::PseudoChunk, Self::BaselineFull, Self::BaselineKvc, Self::BaselineKvcSwa];

    pub fn name(self) -> &'static str {
        match self {
            Self::Attamba => "attamba",
            Self::PseudoChunk => "pseudo_chunk",
            Self::BaselineFull => "baseline_full",
            Self::BaselineKvc => "baseline_kvc",
            Self::BaselineKvcSwa => "baseline_kvc_swa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Self::BaselineFull | Self::BaselineKvc | Self::BaselineKvcSwa)
    }
}

/// Shape and behaviour of a byte-level language model.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    /// Model dimension E.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Chunk size P.
    pub chunk: usize,
    /// Recent positions that keep uncompressed attention.
    pub lead: usize,
    /// SSM state dimension D_S.
    pub state_dim: usize,
    pub mode: Mode,
    /// Attention dimension F of baseline blocks.
    pub baseline_dim: Option<usize>,
    pub baseline_heads: Option<usize>,
    pub strategy: Strategy,
    pub ffn_dim: Option<usize>,
    /// Chunks bisected by the fssm strategy.
    pub fssm_splits: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            seq_len: 256,
            dim: 64,
            heads: 2,
            layers: 2,
            chunk: 4,
            lead: 4,
            state_dim: 16,
            mode: Mode::Attamba,
            baseline_dim: None,
            baseline_heads: None,
            strategy: Strategy::Cyclic,
            ffn_dim: None,
            fssm_splits: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.vocab == 0 || self.seq_len == 0 || self.dim == 0 || self.heads == 0 {
            return bad(format!(
                "vocab, seq_len, dim and heads must be positive (got {}, {}, {}, {})",
                self.vocab, self.seq_len, self.dim, self.heads
            ));
        }
        if self.chunk == 0 || self.lead == 0 || self.state_dim == 0 {
            return bad("chunk, lead and state_dim must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.mode.is_baseline() {
            let (f, h) = (self.attn_dim(), self.attn_heads());
            if f == 0 || h == 0 || f % h != 0 {
                return bad(format!("baseline dim {f} not divisible by {h} heads"));
            }
        }
        if self.ffn_hidden() == 0 {
            return bad("ffn_dim must be positive".into());
        }
        Ok(())
    }

    /// Width of the attention computation: E for SSM modes, F for baselines.
    pub fn attn_dim(&self) -> usize {
        match self.mode {
            Mode::Attamba | Mode::PseudoChunk => self.dim,
            Mode::BaselineFull => self.baseline_dim.unwrap_or(self.dim),
            Mode::BaselineKvc | Mode::BaselineKvcSwa => self.baseline_dim.unwrap_or(self.dim / self.chunk),
        }
    }

    pub fn attn_heads(&self) -> usize {
        if self.mode.is_baseline() {
            self.baseline_heads.unwrap_or(self.heads)
        } else {
            self.heads
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.dim)
    }

    /// Recency window actually applied; pseudo-chunking sees everything.
    pub fn effective_lead(&self) -> usize {
        match self.mode {
            Mode::PseudoChunk => self.seq_len,
            _ => self.lead,
        }
    }

    /// Sliding window applied at evaluation time, if any.
    pub fn eval_window(&self) -> Option<usize> {
        match self.mode {
            Mode::BaselineKvcSwa => Some((self.seq_len / self.chunk).max(1)),
            _ => None,
        }
    }

    pub fn fssm_k(&self, n: usize) -> usize {
        self.fssm_splits.unwrap_or((n.div_ceil(self.chunk) / 4).max(1))
    }
}
