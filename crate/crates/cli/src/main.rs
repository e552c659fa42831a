mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgvsr::config::Precision;

#[derive(Parser)]
#[command(name = "mgvsr", version, about = "Multigrid training for a small recurrent video super-resolution model")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the per-iteration shape and learning-rate table as CSV.
    Schedule {
        #[command(flatten)]
        common: Common,
        /// Emit every Nth iteration.
        #[arg(long, default_value_t = 1)]
        stride: u64,
    },
    /// Train a model and write records, metrics, a report and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Validate the config and print the effective version without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Compare m small SGD steps with one scaled large step.
    Equivalence {
        #[command(flatten)]
        common: Common,
        /// Number of small minibatches.
        #[arg(long, default_value_t = 4)]
        m: usize,
        /// Samples per small minibatch.
        #[arg(long, default_value_t = 2)]
        n: usize,
        /// Learning rates for the drift sweep, largest first.
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 5e-3, 2.5e-3])]
        eta: Vec<f64>,
        /// Use a small tanh regression network instead of the video model.
        #[arg(long)]
        toy: bool,
    },
    /// Time one training iteration per minibatch shape.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Shapes as `HxW&T` or `HxW&TxN`; defaults to the schedule's shapes.
        #[arg(long, value_delimiter = ',')]
        shapes: Vec<String>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Discarded repetitions before timing each shape.
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Score a checkpoint on a data split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Write an untrained checkpoint.
    Init {
        #[command(flatten)]
        common: Common,
        /// All-zero weights: the model then reduces to nearest upsampling.
        #[arg(long)]
        zero: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (train, init) or file (other commands; stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `run.precision`.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(commands::EXIT_USAGE);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = match cli.command {
        Command::Schedule { common, stride } => commands::schedule(&common, stride),
        Command::Train { common, dry_run } => commands::train(&common, dry_run),
        Command::Equivalence { common, m, n, eta, toy } => commands::equivalence(&common, m, n, &eta, toy),
        Command::Bench { common, shapes, reps, warmup } => commands::bench(&common, &shapes, reps, warmup),
        Command::Eval { common, checkpoint, split } => commands::eval(&common, &checkpoint, split),
        Command::Init { common, zero } => commands::init(&common, zero),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind, e.message.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}
