//! Perplexity evaluation over non-overlapping windows, with mode overrides
//! (sliding-window attention for baselines, lead for Attamba models).

use std::path::Path;

use attamba_core::model::{lm_loss, ForwardOptions, ModelConfig, ModelParams};
use attamba_core::numerics::{Tape, Tensor};

use crate::checkpoint;
use crate::corpus::{ingest_corpus, tokenize};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRecord;

/// Windows scored per forward pass.
const EVAL_BATCH: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOverrides {
    /// Sliding attention window for baseline models.
    pub swa: Option<usize>,
    /// Lead (uncompressed window) for Attamba models.
    pub lead: Option<usize>,
}

/// Forward options for evaluation: a `baseline_kvc_swa` model uses its
/// configured window unless overridden.
pub fn eval_options(cfg: &ModelConfig, overrides: EvalOverrides) -> Result<ForwardOptions> {
    if overrides.swa.is_some() && !cfg.mode.is_baseline() {
        return Err(HarnessError::Config("--swa applies to baseline models; use --lead for Attamba".into()));
    }
    if overrides.lead.is_some() && cfg.mode.is_baseline() {
        return Err(HarnessError::Config("--lead applies to Attamba models; use --swa for baselines".into()));
    }
    if overrides.swa == Some(0) || overrides.lead == Some(0) {
        return Err(HarnessError::Config("window and lead must be at least 1".into()));
    }
    Ok(ForwardOptions { window: overrides.swa.or(cfg.eval_window()), lead: overrides.lead, ..Default::default() })
}

/// Windows of `n + 1` tokens at stride `n`, so every target is scored once.
/// Streams shorter than one window yield a single shorter window.
pub fn eval_windows(tokens: &[usize], n: usize, max: usize) -> Vec<&[usize]> {
    if tokens.len() < 2 {
        return Vec::new();
    }
    if tokens.len() < n + 1 {
        return vec![tokens];
    }
    (0..).map(|k| k * n).take_while(|&s| s + n < tokens.len()).take(max).map(|s| &tokens[s..s + n + 1]).collect()
}

/// Mean next-token negative log-likelihood.
pub fn mean_nll(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<f32>>,
    bytes: &[u8],
    max_windows: usize,
    opts: &ForwardOptions,
) -> Result<f64> {
    let tokens = tokenize(bytes);
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(HarnessError::Config(format!("token {t} is outside the model's vocabulary of {}", cfg.vocab)));
    }
    let windows = eval_windows(&tokens, cfg.seq_len, max_windows);
    if windows.is_empty() {
        return Err(HarnessError::Config("evaluation text needs at least two bytes".into()));
    }
    let mut total = 0.0;
    for batch in windows.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let (loss, _) = lm_loss(&mut tape, cfg, &vars, batch, opts)?;
        total += tape.value(loss).item() as f64 * batch.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Scores a checkpoint on the held-out tail of a corpus file.
pub fn evaluate(ckpt: &Path, corpus: &Path, overrides: EvalOverrides, max_windows: usize) -> Result<MetricsRecord> {
    let start = std::time::Instant::now();
    let ckpt = checkpoint::load(ckpt)?;
    let opts = eval_options(&ckpt.meta.model, overrides)?;
    let corpus = ingest_corpus(corpus)?;
    let text = if corpus.eval.len() >= 2 { &corpus.eval } else { &corpus.train };
    let loss = mean_nll(&ckpt.meta.model, &ckpt.params, text, max_windows, &opts)?;
    Ok(MetricsRecord::new(ckpt.meta.step, None, loss, ckpt.meta.tokens_seen, start.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use attamba_core::model::{init_params, Mode};
    use rand::{Rng, SeedableRng};

    #[test]
    fn windows_cover_each_target_once() {
        let t: Vec<usize> = (0..21).collect();
        let w = eval_windows(&t, 5, 100);
        assert_eq!(w.len(), 4);
        assert_eq!(w[0], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(w[3], &[15, 16, 17, 18, 19, 20]);
        assert_eq!(eval_windows(&t, 5, 2).len(), 2);
        assert_eq!(eval_windows(&t[..4], 5, 9), vec![&t[..4]]);
        assert!(eval_windows(&t[..1], 5, 9).is_empty());
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let cfg = ModelConfig { seq_len: 64, dim: 32, ..Default::default() };
        let params = init_params::<f32>(&cfg, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let bytes: Vec<u8> = (0..64 * 16 + 1).map(|_| rng.random()).collect();
        let nll = mean_nll(&cfg, &params, &bytes, 16, &ForwardOptions::default()).unwrap();
        assert!((nll.exp() - 256.0).abs() < 15.0, "ppl {}", nll.exp());
    }

    #[test]
    fn full_lead_equals_pseudo_chunking() {
        let cfg = ModelConfig { seq_len: 32, dim: 16, ..Default::default() };
        let params = init_params::<f32>(&cfg, 2).unwrap();
        let text: Vec<u8> = b"the quick brown fox jumps over the lazy dog ".repeat(4);
        let lead = eval_options(&cfg, EvalOverrides { lead: Some(32), ..Default::default() }).unwrap();
        let a = mean_nll(&cfg, &params, &text, 8, &lead).unwrap();
        let pseudo = ModelConfig { mode: Mode::PseudoChunk, ..cfg.clone() };
        let b = mean_nll(&pseudo, &params, &text, 8, &ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overrides_must_fit_the_mode() {
        let attamba = ModelConfig::default();
        let swa = ModelConfig { mode: Mode::BaselineKvcSwa, ..Default::default() };
        assert!(eval_options(&attamba, EvalOverrides { swa: Some(8), lead: None }).is_err());
        assert!(eval_options(&swa, EvalOverrides { swa: None, lead: Some(8) }).is_err());
        assert_eq!(eval_options(&swa, EvalOverrides::default()).unwrap().window, Some(64));
        assert_eq!(eval_options(&swa, EvalOverrides { swa: Some(9), lead: None }).unwrap().window, Some(9));
    }

    #[test]
    fn vocabulary_mismatch_is_a_config_error() {
        let cfg = ModelConfig { vocab: 100, seq_len: 8, dim: 8, ..Default::default() };
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let err = mean_nll(&cfg, &params, &[200; 20], 4, &ForwardOptions::default()).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }
}
