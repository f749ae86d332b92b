use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::Outcome;
use config::{describe, Key, RunConfig, UsageError};

/// Tiny-object tracking lab: datasets, synthetic data, training, tracking and evaluation.
///
/// Every subcommand reads `key = value` settings from `--config` and
/// `--set`, and writes its outputs plus the effective `config.txt` under
/// `--out`. Exit status: 0 success, 1 failure, 2 usage error.
#[derive(Parser, Debug)]
#[command(name = "tinytrack", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random stream; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `runs/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single `key=value` override, repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the config keys of the subcommand and exit.
    #[arg(long, global = true)]
    keys: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Frame counts, classes and attribute counts of a dataset.
    Stats { data: PathBuf },
    /// Check every sequence of a dataset; exit 1 if any is broken.
    Validate { data: PathBuf },
    /// Tag sequences as train or test.
    Split { data: PathBuf },
    /// Write a synthetic dataset into the run directory.
    Synth,
    /// Degrade one image the way student inputs are degraded.
    Degrade {
        image: PathBuf,
        /// Boxes in groundtruth format; their mean size sets the factor.
        boxes: PathBuf,
    },
    /// Train a tracker, with or without distillation from a teacher.
    Train { data: PathBuf },
    /// Run a checkpoint over one sequence directory or a whole dataset.
    Track { path: PathBuf },
    /// PR / NPR / SR table, CSV and plots for result files.
    Eval {
        #[arg(long, required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Ranking and per-attribute report for result files.
    Report {
        #[arg(long, required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Stats { .. } => "stats",
            Command::Validate { .. } => "validate",
            Command::Split { .. } => "split",
            Command::Synth => "synth",
            Command::Degrade { .. } => "degrade",
            Command::Train { .. } => "train",
            Command::Track { .. } => "track",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }

    fn keys(&self) -> &'static [Key] {
        match self {
            Command::Stats { .. } => commands::STATS_KEYS,
            Command::Validate { .. } => commands::VALIDATE_KEYS,
            Command::Split { .. } => commands::SPLIT_KEYS,
            Command::Synth => commands::SYNTH_KEYS,
            Command::Degrade { .. } => commands::DEGRADE_KEYS,
            Command::Train { .. } => commands::TRAIN_KEYS,
            Command::Track { .. } => commands::TRACK_KEYS,
            Command::Eval { .. } => commands::EVAL_KEYS,
            Command::Report { .. } => commands::REPORT_KEYS,
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let g = &cli.global;
    let cmd = &cli.command;
    if g.keys {
        print!("{}", describe(cmd.keys()));
        return Ok(Outcome::Ok);
    }
    let cfg = RunConfig::resolve(cmd.name(), cmd.keys(), g.config.as_deref(), &g.sets, g.seed)?;
    let out = g.out.clone().unwrap_or_else(|| Path::new("runs").join(cmd.name()));
    cfg.echo(&out)?;
    match cmd {
        Command::Stats { data } => commands::stats(&cfg, data, &out),
        Command::Validate { data } => commands::validate(&cfg, data, &out),
        Command::Split { data } => commands::split(&cfg, data, &out),
        Command::Synth => commands::synth(&cfg, &out),
        Command::Degrade { image, boxes } => commands::degrade(&cfg, image, boxes, &out),
        Command::Train { data } => commands::train_cmd(&cfg, data, &out),
        Command::Track { path } => commands::track(&cfg, path, &out),
        Command::Eval { results, data } => commands::eval(&cfg, results, data, &out),
        Command::Report { results, data } => commands::report(&cfg, results, data, &out),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on its own usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ValidationFailed) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
