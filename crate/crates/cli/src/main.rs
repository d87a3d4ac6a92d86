mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::ConfigError;

#[derive(Parser)]
#[command(name = "sdsnet", version, about = "Depression screening from questionnaire answers and face video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a cohort and write it as a session store.
    Generate(GenerateArgs),
    /// Train one model on every fold but the held-out one.
    Train(TrainArgs),
    /// Score a checkpoint or the sum-score rule on a fold.
    Eval(EvalArgs),
    /// Cross-validate one or more methods over all folds and seeds.
    Cv(CvArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

/// Options shared by every command that reads a run config.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Run config file with [gen], [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: tiny or full.
    #[arg(long)]
    preset: Option<String>,
    /// Video encoder: q3dcnn, bilstm, nonlocal or none.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct DataArg {
    /// Session store root.
    #[arg(long, env = "SDSNET_DATA")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Generation spec file holding only the [gen] fields.
    #[arg(long, conflicts_with = "config")]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long)]
    agreement: Option<f64>,
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArg,
    /// Held-out fold; omit to train on every subject.
    #[arg(long)]
    fold: Option<usize>,
    /// Initialization and batch-order seed (default: first configured seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss and batch log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArg,
    /// Checkpoint written by `train` with the same model config.
    #[arg(long, required_unless_present = "method", conflicts_with = "method")]
    checkpoint: Option<PathBuf>,
    /// Rule-based method instead of a checkpoint.
    #[arg(long, value_parser = ["sds_sum"])]
    method: Option<String>,
    /// Fold to score; omit for every subject.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArg,
    /// Comma-separated methods: sds_sum, or inputs joined by '+', e.g.
    /// sds+time+q3dcnn, q3dcnn, sds+bilstm. Default: sds_sum and the
    /// configured model.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Directory for metrics.csv, report.txt and audit.log.
    #[arg(long)]
    report: PathBuf,
    /// Concurrent (fold, seed) runs; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny", value_parser = ["tiny"])]
    preset: String,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    /// Parameter entries sampled per tensor in the model checks.
    #[arg(long, default_value_t = 6)]
    max_elements: usize,
}

/// Failure classes mapped to exit statuses.
pub enum Failure {
    /// Bad flags, config or paths: exit 2.
    Usage(String),
    /// Training, numeric or I/O failure: exit 1.
    Run(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ConfigError>() {
            Ok(c) => Failure::Usage(c.0),
            Err(e) => Failure::Run(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Generate(_) => "generate",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Cv(_) => "cv",
        Command::Gradcheck(_) => "gradcheck",
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Cv(a) => commands::cv(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
