//! Experiment presets: matched configuration grids at desk scale, each run
//! with the same data and budget, reported as a CSV of final losses.

use std::io::Write;

use attamba_core::chunking::Strategy;
use attamba_core::cost::{parameter_count, solve_iso_flops, solve_iso_kv};
use attamba_core::model::{init_params, Mode, ModelConfig};
use serde::Serialize;

use crate::config::TrainConfig;
use crate::corpus::Corpus;
use crate::error::{HarnessError, Result};
use crate::eval::{eval_options, mean_nll, EvalOverrides};
use crate::train::{load_corpus, train_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    ChunkStrategies,
    ChunkSizes,
    Pseudo,
    SsmDims,
    IsoBaselines,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::ChunkStrategies, Preset::ChunkSizes, Preset::Pseudo, Preset::SsmDims, Preset::IsoBaselines];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ChunkStrategies => "chunk-strategies",
            Preset::ChunkSizes => "chunk-sizes",
            Preset::Pseudo => "pseudo",
            Preset::SsmDims => "ssm-dims",
            Preset::IsoBaselines => "iso-baselines",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| {
            let known: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            HarnessError::Usage(format!("unknown preset `{name}`; expected one of {}", known.join(", ")))
        })
    }
}

/// One trained configuration and the evaluations reported for it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub model: ModelConfig,
    /// `(row label, mode reported, overrides)`; one CSV row each.
    pub evals: Vec<(String, Mode, EvalOverrides)>,
}

impl RunSpec {
    fn new(label: impl Into<String>, model: ModelConfig) -> Self {
        let label = label.into();
        let evals = vec![(label.clone(), model.mode, EvalOverrides::default())];
        Self { label, model, evals }
    }
}

/// The configuration grid of `preset`, derived from `base`.
pub fn grid(preset: Preset, base: &ModelConfig) -> Vec<RunSpec> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut m = base.clone();
        f(&mut m);
        m
    };
    match preset {
        Preset::ChunkStrategies => {
            [Strategy::Uniform, Strategy::Random, Strategy::Cyclic, Strategy::Fattn, Strategy::Fssm]
                .into_iter()
                .map(|s| RunSpec::new(s.name(), with(&|m| m.strategy = s)))
                .collect()
        }
        Preset::ChunkSizes => [2, 4, 8, 16]
            .into_iter()
            .map(|p| {
                RunSpec::new(
                    format!("p{p}"),
                    with(&|m| {
                        m.chunk = p;
                        m.lead = p;
                    }),
                )
            })
            .collect(),
        Preset::Pseudo => vec![
            RunSpec::new("attamba", base.clone()),
            RunSpec::new("pseudo_chunk", with(&|m| m.mode = Mode::PseudoChunk)),
        ],
        Preset::SsmDims => {
            [4, 8, 16, 32].into_iter().map(|d| RunSpec::new(format!("ds{d}"), with(&|m| m.state_dim = d))).collect()
        }
        Preset::IsoBaselines => {
            let (e, p, ds, l, h) =
                (base.dim as u64, base.chunk as u64, base.state_dim as u64, base.seq_len as u64, base.heads as u64);
            let iso_kv = solve_iso_kv(e, p, ds, l, h).dim as usize;
            let iso_flops = solve_iso_flops(e, p, ds, l, h).dim as usize;
            let baseline = |mode, f: usize| {
                with(&|m| {
                    m.mode = mode;
                    m.baseline_dim = Some(f);
                })
            };
            let mut kvc = RunSpec::new("iso_kv", baseline(Mode::BaselineKvc, iso_kv));
            // Same weights, evaluated with sliding-window attention of L/P.
            let window = (base.seq_len / base.chunk).max(1);
            kvc.evals.push((
                "iso_kv_swa".into(),
                Mode::BaselineKvcSwa,
                EvalOverrides { swa: Some(window), lead: None },
            ));
            vec![
                RunSpec::new("attamba", base.clone()),
                RunSpec::new("full_attention", baseline(Mode::BaselineFull, base.dim)),
                kvc,
                RunSpec::new("iso_flops", baseline(Mode::BaselineFull, iso_flops)),
            ]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PresetRow {
    pub preset: String,
    pub label: String,
    pub mode: String,
    pub strategy: String,
    pub chunk: usize,
    pub lead: usize,
    pub state_dim: usize,
    pub attn_dim: usize,
    pub eval_window: Option<usize>,
    pub params: usize,
    pub steps: usize,
    pub tokens: u64,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    pub eval_loss: f64,
    pub perplexity: f64,
    pub seconds: f64,
}

/// Trains every configuration of `preset` with the budget and data of
/// `base`; `on_row` sees each row as it completes.
pub fn run_preset(preset: Preset, base: &TrainConfig, mut on_row: impl FnMut(&PresetRow)) -> Result<Vec<PresetRow>> {
    base.validate()?;
    let corpus = load_corpus(base)?;
    let mut rows = Vec::new();
    for spec in grid(preset, &base.model) {
        for row in run_spec(preset, &spec, base, &corpus)? {
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Trains one configuration and evaluates it under each of its settings.
pub fn run_spec(preset: Preset, spec: &RunSpec, base: &TrainConfig, corpus: &Corpus) -> Result<Vec<PresetRow>> {
    let cfg = TrainConfig {
        model: spec.model.clone(),
        out_dir: base.out_dir.as_ref().map(|d| d.join(preset.name()).join(&spec.label)),
        ..base.clone()
    };
    let params = init_params::<f32>(&cfg.model, cfg.model.seed)?;
    let out = train_from(&cfg, corpus, params)?;
    let eval_text = if corpus.eval.len() >= 2 { &corpus.eval } else { &corpus.train };
    let mut rows = Vec::new();
    for (label, mode, overrides) in &spec.evals {
        let opts = eval_options(&cfg.model, *overrides)?;
        let eval_loss = if *overrides == EvalOverrides::default() {
            out.final_eval_loss
        } else {
            mean_nll(&cfg.model, &out.params, eval_text, cfg.eval_windows, &opts)?
        };
        rows.push(PresetRow {
            preset: preset.name().into(),
            label: label.clone(),
            mode: mode.name().into(),
            strategy: cfg.model.strategy.name().into(),
            chunk: cfg.model.chunk,
            lead: cfg.model.effective_lead(),
            state_dim: cfg.model.state_dim,
            attn_dim: cfg.model.attn_dim(),
            eval_window: opts.window,
            params: parameter_count(&cfg.model),
            steps: cfg.steps,
            tokens: (cfg.steps * cfg.batch * cfg.model.seq_len) as u64,
            initial_loss: out.initial_loss,
            final_train_loss: out.final_train_loss,
            eval_loss,
            perplexity: eval_loss.exp(),
            seconds: out.seconds,
        });
    }
    Ok(rows)
}

/// CSV with a header row.
pub fn write_csv(out: impl Write, rows: &[PresetRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_unknown_is_a_usage_error() {
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert!(matches!(Preset::parse("chunk-size"), Err(HarnessError::Usage(_))));
    }

    #[test]
    fn grids_cover_the_ablations() {
        let base = ModelConfig::default();
        let strategies: Vec<_> = grid(Preset::ChunkStrategies, &base).iter().map(|r| r.model.strategy).collect();
        assert_eq!(
            strategies,
            [Strategy::Uniform, Strategy::Random, Strategy::Cyclic, Strategy::Fattn, Strategy::Fssm]
        );
        let sizes: Vec<_> = grid(Preset::ChunkSizes, &base).iter().map(|r| (r.model.chunk, r.model.lead)).collect();
        assert_eq!(sizes, [(2, 2), (4, 4), (8, 8), (16, 16)]);
        let modes: Vec<_> = grid(Preset::Pseudo, &base).iter().map(|r| r.model.mode).collect();
        assert_eq!(modes, [Mode::Attamba, Mode::PseudoChunk]);
        let dims: Vec<_> = grid(Preset::SsmDims, &base).iter().map(|r| r.model.state_dim).collect();
        assert_eq!(dims, [4, 8, 16, 32]);
    }

    #[test]
    fn iso_baselines_use_solved_widths() {
        let g = grid(Preset::IsoBaselines, &ModelConfig::default());
        let widths: Vec<_> = g.iter().map(|r| (r.label.as_str(), r.model.mode, r.model.attn_dim())).collect();
        assert_eq!(
            widths,
            [
                ("attamba", Mode::Attamba, 64),
                ("full_attention", Mode::BaselineFull, 64),
                ("iso_kv", Mode::BaselineKvc, 16),
                ("iso_flops", Mode::BaselineFull, 30),
            ]
        );
        assert_eq!(g[2].evals[1].2.swa, Some(64));
    }

    #[test]
    fn tiny_preset_writes_a_csv() {
        let base = TrainConfig {
            model: ModelConfig { seq_len: 16, dim: 8, layers: 1, ..Default::default() },
            batch: 2,
            steps: 3,
            eval_interval: 3,
            eval_windows: 2,
            synthetic_bytes: 5000,
            ..Default::default()
        };
        let rows = run_preset(Preset::IsoBaselines, &base, |_| {}).unwrap();
        assert_eq!(rows.len(), 5);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("preset,label,mode,strategy,chunk,lead,state_dim,attn_dim,eval_window,params,"));
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("iso_kv_swa,baseline_kvc_swa"));
    }
}
