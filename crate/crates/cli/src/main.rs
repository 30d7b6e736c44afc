//! `dwac`: train weighted averaging and softmax classifiers, then evaluate
//! predictions, explanations, conformal label sets and out-of-domain
//! credibility.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{HeadChoice, MeasureChoice, RunConfig};

#[derive(Parser)]
#[command(name = "dwac", version, about = "Kernel-weighted classifiers over learned embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per head and trial; write artifacts, histories and a summary.
    Train(RunArgs),
    /// Predict class probabilities with a saved model.
    Predict(RunArgs),
    /// List the training instances behind each prediction of a dwac model.
    Explain(RunArgs),
    /// Coverage and credibility of conformal label sets.
    Conformal(RunArgs),
    /// Credibility of out-of-domain data against in-domain test data.
    Ood(RunArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV path, or `blobs[:n=..,c=..,d=..,sep=..]` for synthetic data.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Separate test CSV; otherwise a test fraction is split off.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Saved model for predict, explain and conformal.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub head: Option<HeadChoice>,
    #[arg(long, value_enum)]
    pub measure: Option<MeasureChoice>,
    #[arg(long)]
    pub h_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated significance levels.
    #[arg(long, value_delimiter = ',')]
    pub epsilon_grid: Option<Vec<f64>>,
    /// Comma-separated neighbor counts for agreement.
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Class to hold out as out-of-domain data. CSV data is encoded with
    /// statistics of the whole file.
    #[arg(long)]
    pub held_class: Option<usize>,
    /// CSV of foreign data, encoded with the training schema.
    #[arg(long)]
    pub foreign: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (Command::Train(args)
    | Command::Predict(args)
    | Command::Explain(args)
    | Command::Conformal(args)
    | Command::Ood(args)) = &cli.command;
    let cfg = RunConfig::resolve(args)?;
    let model = args.model.as_deref();
    match &cli.command {
        Command::Train(_) => commands::train(&cfg, &args.out),
        Command::Predict(_) => commands::predict(&cfg, model, &args.out),
        Command::Explain(_) => commands::explain_cmd(&cfg, model, &args.out),
        Command::Conformal(_) => commands::conformal(&cfg, model, &args.out),
        Command::Ood(_) => commands::ood(&cfg, &args.out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
