mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sista_core::Error;

#[derive(Debug, Parser)]
#[command(name = "sista", version, about = "Soft-label instance and sparse token alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Load the published hyperparameters before applying flags.
    #[arg(long, global = true)]
    pub paper_preset: bool,
    /// Enable or disable one loss, e.g. `sta=off`. Repeatable.
    #[arg(long = "toggle", global = true, value_name = "NAME=on|off")]
    pub toggles: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Omit the timestamp line from the resolved-config dump.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen,
    /// Train the projection heads and write a checkpoint plus metrics.
    Train,
    /// Retrieval and alignment metrics for a checkpoint.
    Eval {
        /// Score a freshly initialized model instead of the checkpoint.
        #[arg(long)]
        untrained: bool,
    },
    /// Train every ablation setting and write a comparison table.
    Ablate,
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck,
    /// Write the alignment weights of one instance as a matrix file.
    ExportHeatmap {
        /// Instance index; defaults to `eval.heatmap_instance`.
        #[arg(long)]
        instance: Option<usize>,
    },
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = commands::resolve(&cli.common).and_then(|ctx| match cli.command {
        Command::Gen => commands::gen(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval { untrained } => commands::eval(&ctx, untrained),
        Command::Ablate => commands::ablate(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
        Command::ExportHeatmap { instance } => commands::export_heatmap(&ctx, instance),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
