use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sspt_core::config::{self, ExperimentConfig, RawConfig};
use sspt_core::{pipeline, SsptError};

#[derive(Parser)]
#[command(name = "sspt", version, about = "Stock-series pre-training, fine-tuning, backtesting and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset artifact and manifest from csv files or a synthetic market
    Ingest(Common),
    /// Pre-train the encoder on the configured tasks
    Pretrain(Common),
    /// Fine-tune for stock selection, optionally from a pre-trained checkpoint
    Finetune(Common),
    /// Top-k backtest on the test split
    Backtest(Common),
    /// Source-identification experiments on simulated series
    Simulate(Common),
    /// Search the Cartesian product of repeated config keys
    Gridsearch(Common),
    /// Summarize the artifacts of an output directory
    Report(Common),
    /// Print every config key with its default
    Defaults,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Usage(String),
    Run(SsptError),
}

fn raw_config(c: &Common) -> Result<RawConfig, Failure> {
    let usage = |e: SsptError| Failure::Usage(e.to_string());
    let mut raw = match &c.config {
        Some(path) => RawConfig::load(path).map_err(usage)?,
        None => RawConfig::default(),
    };
    raw.apply_overrides(&c.overrides).map_err(usage)?;
    if let Some(seed) = c.seed {
        raw.set("seed", &seed.to_string()).map_err(usage)?;
    }
    if let Some(out) = &c.out {
        raw.set("out_dir", &out.display().to_string()).map_err(usage)?;
    }
    Ok(raw)
}

fn run(command: Command) -> Result<(), Failure> {
    let (common, name) = match &command {
        Command::Defaults => {
            print!("{}", config::default_text());
            return Ok(());
        }
        Command::Ingest(c) => (c, "ingest"),
        Command::Pretrain(c) => (c, "pretrain"),
        Command::Finetune(c) => (c, "finetune"),
        Command::Backtest(c) => (c, "backtest"),
        Command::Simulate(c) => (c, "simulate"),
        Command::Gridsearch(c) => (c, "gridsearch"),
        Command::Report(c) => (c, "report"),
    };
    let raw = raw_config(common)?;
    if name == "gridsearch" {
        let outcome = pipeline::cmd_gridsearch(&raw).map_err(Failure::Run)?;
        print!("{}{}", outcome.table, outcome.test_report);
        return Ok(());
    }
    if !raw.grid_keys().is_empty() {
        return Err(Failure::Usage(format!(
            "repeated keys [{}] are only accepted by gridsearch",
            raw.grid_keys().join(", ")
        )));
    }
    let cfg = ExperimentConfig::resolve(&raw).map_err(Failure::Run)?;
    let text = match name {
        "ingest" => pipeline::cmd_ingest(&cfg),
        "pretrain" => pipeline::cmd_pretrain(&cfg),
        "finetune" => pipeline::cmd_finetune(&cfg),
        "backtest" => pipeline::cmd_backtest(&cfg).map(|r| {
            format!("days = {}\nirr = {}\nirr_mean = {}\nsharpe = {}\n", r.days, r.irr_sum, r.irr_mean, r.sharpe)
        }),
        "simulate" => pipeline::cmd_simulate(&cfg),
        "report" => pipeline::cmd_report(&cfg),
        _ => unreachable!("every command is dispatched"),
    }
    .map_err(Failure::Run)?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
