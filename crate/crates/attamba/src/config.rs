//! Training configuration, read from JSON with snake_case field names that
//! mirror [`TrainConfig`] and [`ModelConfig`].

use std::path::{Path, PathBuf};

use attamba_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

/// Bytes of synthetic text generated when no corpus path is given.
pub const SYNTHETIC_BYTES: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Sequences per step (B).
    pub batch: usize,
    /// Optimizer updates; zero writes the initialization as the checkpoint.
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Cosine decay ends at `lr · min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub eval_interval: usize,
    /// Cap on evaluation windows of `seq_len + 1` bytes.
    pub eval_windows: usize,
    /// Text file to train on; a seeded synthetic corpus is used when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    /// Where metrics, run metadata and the checkpoint go; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// Seeds data sampling and the synthetic corpus (the model has its own).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch: 4,
            steps: 2000,
            lr: 3e-3,
            warmup: 100,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_interval: 250,
            eval_windows: 32,
            corpus: None,
            synthetic_bytes: SYNTHETIC_BYTES,
            out_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.model.vocab != 256 {
            return bad("byte-level training needs vocab = 256");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if self.eval_interval == 0 || self.eval_windows == 0 {
            return bad("eval_interval and eval_windows must be at least 1");
        }
        Ok(())
    }

    /// Hyperparameters chosen by convention rather than taken from a
    /// reference recipe, recorded in run metadata.
    pub fn default_labels(&self) -> Vec<&'static str> {
        let d = Self::default();
        let mut out = Vec::new();
        if self.lr == d.lr {
            out.push("lr");
        }
        if self.warmup == d.warmup {
            out.push("warmup");
        }
        if self.min_lr_ratio == d.min_lr_ratio {
            out.push("min_lr_ratio");
        }
        if (self.beta1, self.beta2) == (d.beta1, d.beta2) {
            out.push("betas");
        }
        if self.grad_clip == d.grad_clip {
            out.push("grad_clip");
        }
        out.push("weight_decay=0");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_uses_snake_case_fields_and_defaults() {
        let cfg: TrainConfig = serde_json::from_str(
            r#"{"model": {"dim": 32, "chunk": 8, "mode": "baseline_kvc_swa", "strategy": "random"},
                "batch": 2, "steps": 10, "grad_clip": 0.5, "out_dir": "runs/x"}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.model.mode, attamba_core::model::Mode::BaselineKvcSwa);
        assert_eq!(cfg.model.strategy, attamba_core::chunking::Strategy::Random);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!((cfg.batch, cfg.steps, cfg.grad_clip), (2, 10, 0.5));
        assert_eq!(cfg.lr, 3e-3);
        assert_eq!(cfg.out_dir.as_deref(), Some(Path::new("runs/x")));
        cfg.validate().unwrap();

        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
        for cfg in [
            TrainConfig { batch: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { eval_interval: 0, ..Default::default() },
            TrainConfig { model: ModelConfig { vocab: 100, ..Default::default() }, ..Default::default() },
            TrainConfig { model: ModelConfig { dim: 63, ..Default::default() }, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
