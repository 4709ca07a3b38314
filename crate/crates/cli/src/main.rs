mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::CliError;

/// Soft MoE with a linear-attention combine inside a contrastive image/text
/// encoder, trained and evaluated on a synthetic live/attack benchmark.
#[derive(Debug, Parser)]
#[command(name = "lasoftmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; `resolved.conf` is written here before any work starts.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides one config key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/eval/test splits into --out.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model variant and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (sets `paths.data`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// vanilla | softmoe | la_softmoe (sets `encoder.variant`).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score a split with a checkpoint and print the metrics report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; its directory's resolved.conf is used when --config is absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// train | eval | test (sets `eval.split`).
        #[arg(long)]
        split: Option<String>,
        /// Template id such as T-3 (sets `train.template`).
        #[arg(long)]
        template: Option<String>,
        /// Report every template in the prompt set and the ACC spread across them.
        #[arg(long)]
        all_templates: bool,
    },
    /// Train all three variants for each seed and print the median comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Comma-separated seeds (sets `ablate.seeds`).
        #[arg(long, value_name = "LIST")]
        seeds: Option<String>,
        /// Train the three variants of a seed concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference gradient checks at the given scope.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// ops | moe | block | full
        #[arg(long, default_value = "ops")]
        scope: String,
        /// Scale matmul input gradients by this factor to confirm the checker fails.
        #[arg(long, hide = true, value_name = "FACTOR")]
        corrupt_matmul_grad: Option<f64>,
    },
    /// Write per-sample image embeddings of a split to --out/embeddings.uaem.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
}

fn run(cmd: Command) -> Result<ExitCode, CliError> {
    match cmd {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train { common, data, variant } => commands::train(&common, data, variant),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            template,
            all_templates,
        } => commands::eval(&common, &checkpoint, data, split, template, all_templates),
        Command::Ablate {
            common,
            data,
            seeds,
            parallel,
        } => commands::ablate(&common, data, seeds, parallel),
        Command::Gradcheck {
            common,
            scope,
            corrupt_matmul_grad,
        } => commands::gradcheck(&common, &scope, corrupt_matmul_grad),
        Command::DumpEmbeddings {
            common,
            checkpoint,
            data,
            split,
        } => commands::dump_embeddings(&common, &checkpoint, data, split),
    }
}

fn main() -> ExitCode {
    let table = config::defaults_table();
    let parsed = Cli::command()
        .after_help(table.clone())
        .mut_subcommands(|c| c.after_help(table.clone()))
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
