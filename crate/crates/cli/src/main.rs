// SPDX-License-Identifier: MIT OR Apache-2.0

//! `conflict-probe`: trains the model triplet and runs the probing stages.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conflict_probe::config::RunConfig;
use conflict_probe::pipeline::{init_thread_pool, Pipeline};
use conflict_probe::verify::verify_run;
use conflict_probe::ProbeError;

#[derive(Parser, Debug)]
#[command(name = "conflict-probe", version, about = "Probe how a small transformer stores conflicting facts")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the configuration file.
#[derive(Args, Debug, Default)]
struct Common {
    /// TOML configuration file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Inclusive 1-based layer range, e.g. `5..8`.
    #[arg(long, global = true)]
    layers: Option<String>,
    /// `attn`, `mlp` or `both`.
    #[arg(long, global = true)]
    component: Option<String>,
    /// Source target: `t1`, `t2` or `both`.
    #[arg(long, global = true)]
    ts: Option<String>,
    /// Magnitude bins: `paper` or `derived`.
    #[arg(long, global = true)]
    bins: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the paired corpora, tokenizer and prompt set.
    GenCorpus,
    /// Train the base, mix and clean models.
    Train,
    /// Per-layer logit-lens contributions of the mix model.
    Lens,
    /// Same-model activation patching sweep.
    Patch,
    /// Cross-model patching from the clean model into the mix model.
    Cmap,
    /// Bin, aggregate and write the report bundle.
    Report,
    /// Re-check invariants and acceptance conditions over an existing run.
    Verify,
    /// Every stage in order.
    Run,
    /// Print the effective configuration as TOML.
    Config,
}

fn effective_config(c: &Common) -> Result<RunConfig, ProbeError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(layers) = &c.layers {
        cfg.probe.layers = Some(layers.clone());
    }
    if let Some(comp) = &c.component {
        cfg.probe.component = comp.parse().map_err(ProbeError::InvalidConfig)?;
    }
    if let Some(ts) = &c.ts {
        cfg.probe.ts = ts.parse().map_err(ProbeError::InvalidConfig)?;
    }
    if let Some(bins) = &c.bins {
        cfg.probe.bins = bins.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, ProbeError> {
    let cfg = effective_config(&cli.common)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let pipeline = Pipeline::new(cfg)?;
    match cli.command {
        Command::GenCorpus => drop(pipeline.cmd_gen_corpus()?),
        Command::Train => drop(pipeline.cmd_train()?),
        Command::Lens => drop(pipeline.cmd_lens()?),
        Command::Patch => drop(pipeline.cmd_patch()?),
        Command::Cmap => drop(pipeline.cmd_cmap()?),
        Command::Report => drop(pipeline.cmd_report()?),
        Command::Run => pipeline.run_all()?,
        Command::Verify => {
            let report = verify_run(&pipeline);
            for check in &report.checks {
                println!("{check}");
            }
            if !report.all_passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Config => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}
