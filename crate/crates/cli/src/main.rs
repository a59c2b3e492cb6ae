//! `concur`: pretraining, evaluation, curriculum tables, ablations and
//! dataset dumps from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ConfigError;

#[derive(Parser)]
#[command(
    name = "concur",
    version,
    about = "Contrastive video pretraining with a temporal-span curriculum"
)]
struct Cli {
    /// Worker threads for data generation, sampling and inference
    /// (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config: an optional "preset" plus overrides of any field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk or paper-scale.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted-path override, e.g. --set loss.cs_weight=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining; writes config.json, metrics.jsonl and checkpoint.bin.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear evaluation, fine-tuning or retrieval on a checkpoint.
    Eval {
        mode: EvalMode,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the temporal span used at every epoch.
    Schedule {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Curriculum x context-similarity grid, each cell pretrained and linearly evaluated.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per cell, starting at the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Writes the train and test videos as individual files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Linear,
    Finetune,
    Retrieve,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { cfg, out } => commands::pretrain(&cfg, &out),
        Command::Eval {
            mode,
            checkpoint,
            cfg,
            out,
        } => commands::eval(mode, &checkpoint, &cfg, &out),
        Command::Schedule { cfg } => commands::schedule(&cfg),
        Command::Ablate { cfg, out, seeds } => commands::ablate(&cfg, &out, seeds),
        Command::GenData { cfg, out } => commands::gen_data(&cfg, &out),
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
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed stdout (`concur schedule | head`) is not a failure
        Err(e)
            if e.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                eprintln!("\nRun `concur --help` for usage.");
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
