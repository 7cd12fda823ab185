use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use tce_core::TceError;

mod commands;
mod config;

/// Self-supervised temporally coherent frame embeddings: synthetic data,
/// pretraining, downstream classification and trajectory curvature metrics.
///
/// Exit status: 0 on success, 1 for usage or configuration errors, 2 when a
/// run fails.
#[derive(Debug, Parser)]
#[command(name = "tce", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `section.key = value` file; `#` starts a comment.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for data generation, pretraining and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for data and evaluation passes.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic moving-shape dataset into --out.
    Synth,
    /// Self-supervised pretraining; writes checkpoints and metrics.tsv to --out.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
        /// Continue the run stored in this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Train a classifier on top of a pretrained encoder.
    Finetune {
        #[command(flatten)]
        data: DataArg,
        /// Pretraining checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Print the top-1 accuracy of a saved classifier.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        /// Classifier written by `finetune`.
        #[arg(long, value_name = "PATH")]
        classifier: PathBuf,
        /// Videos to score; the split follows eval.held_out_fraction and eval.seed.
        #[arg(long, value_enum, default_value_t = SplitArg::HeldOut)]
        split: SplitArg,
    },
    /// Print mean TAC/MAC of a checkpoint's embeddings over a dataset.
    Metrics {
        #[command(flatten)]
        data: DataArg,
        /// Pretraining checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Write per-frame embeddings (text and TCEB) for every video into --out.
    ExportEmbeddings {
        #[command(flatten)]
        data: DataArg,
        /// Pretraining checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Export only this video (position in the dataset).
        #[arg(long)]
        video: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset directory (manifest.tsv plus frame folders). Without it the
    /// synthetic dataset described by the synth.* keys is rendered in memory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    HeldOut,
    Train,
    All,
}

/// How a command failed.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(TceError),
}

impl From<TceError> for Failure {
    fn from(e: TceError) -> Self {
        match e {
            TceError::Config(msg) => Failure::Usage(msg),
            e => Failure::Run(e),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let command = Cli::command().after_long_help(config::defaults_help());
    let cli = match command
        .try_get_matches_from(std::env::args_os())
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `tce --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let Common {
        config,
        seed,
        out,
        set,
        workers,
    } = cli.common;
    let cfg = config::build(&config::Sources {
        file: config.as_deref(),
        seed,
        workers,
        sets: &set,
    })
    .map_err(Failure::Usage)?;
    let out = out.as_deref();
    match cli.command {
        Command::Synth => commands::synth(&cfg, required(out)?),
        Command::Pretrain { data, resume } => commands::pretrain(&cfg, data.data.as_deref(), resume.as_deref(), out),
        Command::Finetune { data, checkpoint } => commands::finetune(&cfg, data.data.as_deref(), &checkpoint, out),
        Command::Evaluate {
            data,
            classifier,
            split,
        } => commands::evaluate(&cfg, data.data.as_deref(), &classifier, split.into(), out),
        Command::Metrics { data, checkpoint } => commands::metrics(&cfg, data.data.as_deref(), &checkpoint, out),
        Command::ExportEmbeddings {
            data,
            checkpoint,
            video,
        } => commands::export(&cfg, data.data.as_deref(), &checkpoint, video, required(out)?),
    }
}

fn required(out: Option<&std::path::Path>) -> Result<&std::path::Path, Failure> {
    out.ok_or_else(|| Failure::Usage("this command needs --out <DIR>".into()))
}

impl From<SplitArg> for commands::Subset {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::HeldOut => commands::Subset::HeldOut,
            SplitArg::Train => commands::Subset::Train,
            SplitArg::All => commands::Subset::All,
        }
    }
}
