// SPDX-License-Identifier: MIT OR Apache-2.0

//! `causalgaze`: synthesize datasets, train and evaluate the detector,
//! export causal-subgraph explanations, inspect records and run the
//! gradient-check suite.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use causalgaze::dataio::Split;
use causalgaze::detector::{Ablation, RegMode, SensitivityTarget};
use causalgaze::interpret::SaliencyGraph;
use causalgaze::train::Monitor;
use causalgaze::verify::SuiteConfig;
use clap::{Args, Parser, Subcommand};

use crate::config::CliConfig;
use crate::exit::usage;

#[derive(Parser)]
#[command(name = "causalgaze", version, about = "Hallucination detection over refined attention graphs")]
struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only records extracted from this layer.
    #[arg(long)]
    layer: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        signal_strength: Option<f64>,
        #[arg(long)]
        n_spurious: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Train the detector; writes a checkpoint, metrics JSONL and a run summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train this many seed-derived runs and report mean ± stdev.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        reg_mode: Option<RegMode>,
        #[arg(long)]
        monitor: Option<Monitor>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Print AUROC, F1, accuracy and count for one split as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Write DOT and JSON causal-subgraph reports for the given samples.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Sample id to explain (repeatable).
        #[arg(long = "id")]
        ids: Vec<String>,
        #[arg(long)]
        node_quantile: Option<f64>,
        #[arg(long)]
        edge_floor: Option<f64>,
        #[arg(long)]
        target: Option<SensitivityTarget>,
        #[arg(long)]
        graph: Option<SaliencyGraph>,
    },
    /// Print a record's header and validation results.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Path to a CGZ1 record file.
        record: Option<PathBuf>,
        /// Look the record up by id in --data instead.
        #[arg(long)]
        id: Option<String>,
    },
    /// Run the finite-difference gradient suite; exits 5 on any breach.
    Gradcheck {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        sensitivity_trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn apply_common(cfg: &mut CliConfig, c: &Common) {
    if let Some(v) = &c.data {
        cfg.paths.data = Some(v.clone());
    }
    if let Some(v) = &c.out {
        cfg.paths.out = Some(v.clone());
    }
    if let Some(v) = &c.checkpoint {
        cfg.paths.checkpoint = Some(v.clone());
    }
    if let Some(v) = c.layer {
        cfg.run.layer = Some(v);
    }
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("CAUSALGAZE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("CAUSALGAZE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { common, n, d, signal_strength, n_spurious, noise_sigma } => {
            apply_common(&mut cfg, &common);
            set(&mut cfg.synth.seed, &common.seed);
            set(&mut cfg.synth.n_samples, &n);
            set(&mut cfg.synth.d, &d);
            set(&mut cfg.synth.signal_strength, &signal_strength);
            set(&mut cfg.synth.n_spurious, &n_spurious);
            set(&mut cfg.synth.noise_sigma, &noise_sigma);
            commands::synth(&cfg)
        }
        Command::Train { common, runs, ablation, reg_mode, monitor, epochs, lr } => {
            apply_common(&mut cfg, &common);
            set(&mut cfg.train.seed, &common.seed);
            set(&mut cfg.run.runs, &runs);
            set(&mut cfg.train.ablation, &ablation);
            set(&mut cfg.train.reg_mode, &reg_mode);
            set(&mut cfg.train.monitor, &monitor);
            set(&mut cfg.train.epochs, &epochs);
            set(&mut cfg.train.lr0, &lr);
            commands::train_cmd(&cfg)
        }
        Command::Eval { common, split } => {
            apply_common(&mut cfg, &common);
            commands::eval(&cfg, split)
        }
        Command::Explain { common, ids, node_quantile, edge_floor, target, graph } => {
            apply_common(&mut cfg, &common);
            set(&mut cfg.explain.node_quantile, &node_quantile);
            set(&mut cfg.explain.edge_floor, &edge_floor);
            set(&mut cfg.explain.target, &target);
            set(&mut cfg.explain.graph, &graph);
            commands::explain(&cfg, &ids)
        }
        Command::Inspect { common, record, id } => {
            apply_common(&mut cfg, &common);
            commands::inspect(&cfg, record.as_deref(), id.as_deref())
        }
        Command::Gradcheck { trials, sensitivity_trials, seed, json } => {
            let mut suite = SuiteConfig::default();
            set(&mut suite.trials, &trials);
            set(&mut suite.sensitivity_trials, &sensitivity_trials);
            set(&mut suite.seed, &seed);
            commands::gradcheck(&suite, json.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::code_for(&err))
        }
    }
}
