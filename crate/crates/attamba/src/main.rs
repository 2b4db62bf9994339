//! `attamba` command line: training, evaluation, presets and inspection tools.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attamba::checkpoint;
use attamba::config::TrainConfig;
use attamba::error::{io_err, HarnessError, Result};
use attamba::eval::{evaluate, EvalOverrides};
use attamba::presets::{run_preset, write_csv, Preset};
use attamba::tools::{cost_summary, decode_sim, iso_sweep_csv, mask_dump};
use attamba::train::train;
use attamba_core::chunking::Strategy;
use attamba_core::cost::CostInputs;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attamba", version, about = "Attamba byte-level language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configuration's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out tail of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Sliding attention window for baseline models.
        #[arg(long)]
        swa: Option<usize>,
        /// Leading-token window for Attamba models.
        #[arg(long)]
        lead: Option<usize>,
        #[arg(long, default_value_t = 64)]
        max_windows: usize,
    },
    /// Analytic KV-cache, FLOP and activation costs plus iso-baseline widths.
    Cost {
        #[arg(long = "E", default_value_t = 512)]
        dim: u64,
        #[arg(long = "P", default_value_t = 4)]
        chunk: u64,
        #[arg(long = "L", default_value_t = 4096)]
        seq_len: u64,
        #[arg(long = "Ds", default_value_t = 32)]
        state_dim: u64,
        #[arg(long = "H", default_value_t = 8)]
        heads: u64,
        #[arg(long = "B", default_value_t = 1)]
        batch: u64,
        /// Chunk sizes of the iso-baseline table.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        sweep: Vec<u64>,
        /// Write the table here instead of after the report on stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Decode a prompt token by token and report the cache after each step.
    DecodeSim {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        /// Greedy tokens to generate after the prompt.
        #[arg(long, default_value_t = 0)]
        generate: usize,
        /// Compare every step with a full forward pass.
        #[arg(long)]
        verify: bool,
    },
    /// Print a chunk plan's training mask as a grid.
    MaskDump {
        #[arg(long)]
        n: usize,
        #[arg(long = "P")]
        chunk: usize,
        #[arg(long, default_value = "uniform", value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 1)]
        lead: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the plan and mask as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and compare a named configuration grid.
    Preset {
        name: String,
        /// Base configuration; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Directory for per-run metrics and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Results table; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("unknown strategy `{s}`"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>> {
    Ok(io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            let outcome = train(&cfg)?;
            print_json(outcome.final_record())?;
            if let Some(p) = &outcome.checkpoint {
                eprintln!("checkpoint: {}", p.display());
            }
        }
        Command::Eval { ckpt, corpus, swa, lead, max_windows } => {
            let record = evaluate(&ckpt, &corpus, EvalOverrides { swa, lead }, max_windows)?;
            print_json(&record)?;
        }
        Command::Cost { dim, chunk, seq_len, state_dim, heads, batch, sweep, csv } => {
            let inputs = CostInputs { batch, seq_len, dim, heads, chunk, state_dim };
            print_json(&cost_summary(&inputs)?)?;
            match csv {
                Some(path) => iso_sweep_csv(create(&path)?, &inputs, &sweep)?,
                None => {
                    println!();
                    iso_sweep_csv(io::stdout().lock(), &inputs, &sweep)?;
                }
            }
        }
        Command::DecodeSim { ckpt, prompt, generate, verify } => {
            let ck = checkpoint::load(&ckpt)?;
            let prompt = read(&prompt)?;
            let report = decode_sim(&ck.meta.model, &ck.params, &prompt, generate, verify, io::stdout().lock())?;
            if let Some(dev) = report.max_deviation {
                eprintln!("max deviation from full forward: {dev:e}");
            }
        }
        Command::MaskDump { n, chunk, strategy, layer, lead, seed, json } => {
            let dump = mask_dump(n, chunk, strategy, layer, lead, seed)?;
            print!("{}", dump.grid());
            if let Some(path) = json {
                let mut w = create(&path)?;
                serde_json::to_writer_pretty(&mut w, &dump)?;
                writeln!(w).and_then(|_| w.flush()).map_err(io_err(&path))?;
            }
        }
        Command::Preset { name, config, steps, out, csv } => {
            let preset = Preset::parse(&name)?;
            let mut base = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = steps {
                base.steps = s;
            }
            if out.is_some() {
                base.out_dir = out;
            }
            let rows = run_preset(preset, &base, |row| {
                eprintln!("{}: eval loss {:.4} ({:.0} s)", row.label, row.eval_loss, row.seconds)
            })?;
            match csv {
                Some(path) => write_csv(create(&path)?, &rows)?,
                None => write_csv(io::stdout().lock(), &rows)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Usage(_) => ExitCode::from(2),
                HarnessError::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
