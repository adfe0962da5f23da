//! `shaping`: train, evaluate and sweep opponent-shaping experiments.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "shaping", version, about = "Model-free opponent shaping in repeated matrix games")]
struct Cli {
    /// Worker threads (default: one per parallel environment; eval uses every core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run per seed, then evaluate the trained pairs.
    Train(TrainArgs),
    /// Evaluate trained run directories.
    Eval(EvalArgs),
    /// Train every point of a parameter grid.
    Sweep(SweepArgs),
    /// Print the default configuration as TOML.
    PrintDefaults(DefaultsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Reference hyperparameters.
    Paper,
    /// Step sizes rescaled for the small policies used here.
    Desk,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Base configuration file; excludes --preset/--game/--mode/--opponent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// ipd, imp, icg, ish or cipd.
    #[arg(long)]
    game: Option<String>,
    /// baseline, enriched-baseline or shaper.
    #[arg(long)]
    mode: Option<String>,
    /// Opponent initialization: default, p75, p50 or p25.
    #[arg(long)]
    opponent: Option<String>,
    /// Number of seeds, numbered from 0.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_naive: Option<f64>,
    #[arg(long)]
    vf_naive: Option<f64>,
    #[arg(long)]
    lr_shaper: Option<f64>,
    #[arg(long)]
    vf_shaper: Option<f64>,
    #[arg(long)]
    clip_shaper: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the prompts of the first trial to prompts.log.
    #[arg(long)]
    emit_prompts: bool,
    /// Override any configuration key, e.g. --set trial.rounds=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Evaluation episode lengths, e.g. --T 20,50,100.
    #[arg(long = "T", value_delimiter = ',')]
    t_eval: Vec<u32>,
    /// Skip the evaluation after training.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directories (each with config.toml and checkpoints/).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Evaluation episode lengths, e.g. --T 20,50,100.
    #[arg(long = "T", value_delimiter = ',')]
    t_eval: Vec<u32>,
    /// Checkpoint name prefix inside checkpoints/.
    #[arg(long, default_value = "final")]
    stem: String,
    /// Episodes per seed and episode length.
    #[arg(long)]
    n_games: Option<usize>,
    /// Output directory for eval.csv and the summaries.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// A grid axis: KEY=V1,V2,... (repeatable).
    #[arg(long = "grid", value_name = "KEY=V1,V2")]
    grid: Vec<String>,
    #[arg(long)]
    no_eval: bool,
}

#[derive(Debug, Args)]
struct DefaultsArgs {
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long, default_value = "ipd")]
    game: String,
    #[arg(long, default_value = "shaper")]
    mode: String,
    #[arg(long, default_value = "default")]
    opponent: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
