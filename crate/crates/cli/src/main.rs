//! `ssco`: instance generation, training, evaluation and validation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssco_core::config::PRESETS;

#[derive(Parser, Debug)]
#[command(
    name = "ssco",
    version,
    about = "Hierarchical latent planning for budgeted stochastic optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_parser = PRESETS)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Read instances from this directory instead of generating them.
    #[arg(long)]
    pub instances: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured instances as JSON files.
    Gen(Common),
    /// Train an agent; writes a checkpoint, a JSONL metrics stream and a summary.
    Train(Common),
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episodes per instance; defaults to the configured count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Exact optimum of small AIM instances, optionally checked by simulation.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Monte-Carlo rollouts of the optimal policy per instance.
        #[arg(long, default_value_t = 0)]
        rollouts: usize,
    },
    /// Heuristic baselines as a results table.
    Baselines {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        /// Cycle length of the static schedule.
        #[arg(long, default_value_t = 2)]
        cycle: usize,
    },
    /// Geometry diagnostics, duration ordering and value calibration.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Exit with status 2 when a check fails.
        #[arg(long)]
        strict: bool,
        /// Held-out instances used by the protocols.
        #[arg(long, default_value_t = 10)]
        held_out: usize,
        /// States ranked by the duration-ordering protocol.
        #[arg(long, default_value_t = 20)]
        states: usize,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
    },
    /// Retrain with individual geometry terms switched off.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(c) => commands::gen(&c),
        Command::Train(c) => commands::train(&c),
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => commands::eval(&common, checkpoint, episodes),
        Command::Oracle { common, rollouts } => commands::oracle(&common, rollouts),
        Command::Baselines {
            common,
            episodes,
            cycle,
        } => commands::baselines(&common, episodes, cycle),
        Command::Validate {
            common,
            checkpoint,
            strict,
            held_out,
            states,
            resamples,
        } => commands::validate(
            &common,
            &commands::ValidateOptions {
                checkpoint,
                strict,
                held_out,
                states,
                resamples,
            },
        ),
        Command::Ablate { common, seeds } => commands::ablate(&common, seeds),
    };
    match result {
        Ok(commands::Outcome::Ok) => ExitCode::SUCCESS,
        Ok(commands::Outcome::ValidationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
