//! The training loop: random windows from the training split, next-token
//! cross-entropy, Adam with warmup/cosine and clipping, periodic evaluation,
//! metrics JSONL, run metadata and an ATMB checkpoint.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use attamba_core::chunking::{ChunkPlan, Strategy};
use attamba_core::model::{collect_grads, init_params, lm_loss, ForwardOptions, ModelParams};
use attamba_core::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::config::TrainConfig;
use crate::corpus::{ingest_corpus, synthetic_corpus, tokenize, Corpus};
use crate::error::{io_err, HarnessError, Result};
use crate::eval::{eval_options, mean_nll, EvalOverrides};
use crate::metrics::{write_jsonl, MetricsRecord};
use crate::optim::{clip_global_norm, lr_at, Adam};

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    /// Train loss of the last record.
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub params: ModelParams<Tensor<f32>>,
    pub checkpoint: Option<PathBuf>,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("training always records step 0")
    }
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    config: &'a TrainConfig,
    parameters: usize,
    corpus_bytes: usize,
    /// Hyperparameters taken from convention rather than a reference recipe.
    conventional_defaults: Vec<&'static str>,
    lr_schedule: &'static str,
}

pub fn load_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    match &cfg.corpus {
        Some(path) => ingest_corpus(path),
        None => Ok(Corpus::split(synthetic_corpus(cfg.synthetic_bytes, cfg.seed))),
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let params = init_params::<f32>(&cfg.model, cfg.model.seed)?;
    train_from(cfg, &corpus, params)
}

/// Block index of a parameter named `blocks.<l>.…`.
fn layer_of_param(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.split('.').next()?.parse().ok()
}

/// Seeds the random-boundary plan of one step; the batch shares it.
fn plan_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains `params` in place of a fresh initialization.
pub fn train_from(cfg: &TrainConfig, corpus: &Corpus, mut params: ModelParams<Tensor<f32>>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let m = &cfg.model;
    let n = m.seq_len;
    let train = tokenize(&corpus.train);
    if train.len() < n + 1 {
        return Err(HarnessError::Config(format!(
            "training split has {} bytes; seq_len {n} needs at least {}",
            train.len(),
            n + 1
        )));
    }
    let eval_text = if corpus.eval.len() >= 2 { &corpus.eval } else { &corpus.train };
    let eval_opts = eval_options(m, EvalOverrides::default())?;
    let evaluate = |p: &ModelParams<Tensor<f32>>| mean_nll(m, p, eval_text, cfg.eval_windows, &eval_opts);

    let mut metrics = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let meta = RunMetadata {
                config: cfg,
                parameters: params.param_count(),
                corpus_bytes: corpus.len(),
                conventional_defaults: cfg.default_labels(),
                lr_schedule: "linear warmup, then cosine decay to lr * min_lr_ratio",
            };
            let path = dir.join("run.json");
            std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(io_err(&path))?;
            let path = dir.join("metrics.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(io_err(&path))?))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tokens_per_step = (cfg.batch * n) as u64;
    let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut records = Vec::new();
    let mut push = |records: &mut Vec<MetricsRecord>, rec: MetricsRecord| -> Result<()> {
        if let Some(out) = metrics.as_mut() {
            write_jsonl(out, &rec)?;
        }
        records.push(rec);
        Ok(())
    };

    let mut acc = 0.0;
    let mut count = 0;
    let mut initial_loss = f64::NAN;
    for step in 0..cfg.steps.max(1) {
        let offsets: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..=train.len() - n - 1)).collect();
        let windows: Vec<&[usize]> = offsets.iter().map(|&o| &train[o..o + n + 1]).collect();
        let opts = ForwardOptions {
            plan: (m.strategy == Strategy::Random && !m.mode.is_baseline())
                .then(|| ChunkPlan::random(n, m.chunk, m.layers, plan_seed(m.seed, step))),
            ..Default::default()
        };

        if let Some(name) = params.named().into_iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n) {
            return Err(HarnessError::Diverged { step, layer: layer_of_param(&name), op: name });
        }
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let (loss_var, trace) = lm_loss(&mut tape, m, &vars, &windows, &opts)?;
        let loss = tape.value(loss_var).item() as f64;
        if let Some((node, op)) = tape.first_nonfinite() {
            return Err(HarnessError::Diverged { step, layer: trace.layer_of_node(node), op: op.into() });
        }
        if !loss.is_finite() {
            return Err(HarnessError::Diverged { step, layer: None, op: "cross_entropy".into() });
        }
        if step == 0 {
            initial_loss = loss;
            push(
                &mut records,
                MetricsRecord::new(0, Some(loss), evaluate(&params)?, 0, start.elapsed().as_secs_f64()),
            )?;
            if cfg.steps == 0 {
                break;
            }
        }

        let grads = tape.backward(loss_var)?;
        let mut grads = collect_grads(&params, &vars, &grads);
        if !clip_global_norm(&mut grads, cfg.grad_clip).is_finite() {
            return Err(HarnessError::Diverged { step, layer: None, op: "backward".into() });
        }
        let lr = lr_at(step, cfg.steps, cfg.warmup, cfg.lr, cfg.min_lr_ratio);
        adam.step(&mut params, &grads, lr);

        acc += loss;
        count += 1;
        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.steps {
            let eval = evaluate(&params)?;
            let rec = MetricsRecord::new(
                done,
                Some(acc / count as f64),
                eval,
                done as u64 * tokens_per_step,
                start.elapsed().as_secs_f64(),
            );
            push(&mut records, rec)?;
            acc = 0.0;
            count = 0;
        }
    }

    let checkpoint = match &cfg.out_dir {
        Some(dir) => {
            let path = dir.join("model.atmb");
            let ckpt = Checkpoint {
                meta: CheckpointMeta {
                    model: m.clone(),
                    step: cfg.steps,
                    tokens_seen: cfg.steps as u64 * tokens_per_step,
                },
                params: params.clone(),
            };
            checkpoint::save(&path, &ckpt)?;
            Some(path)
        }
        None => None,
    };
    let last = records.last().expect("step 0 is always recorded");
    Ok(TrainOutcome {
        initial_loss,
        final_train_loss: last.train_loss.unwrap_or(f64::NAN),
        final_eval_loss: last.eval_loss,
        records,
        params,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    })
}
