use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairbounty_core::FinderKind;

mod audit;
mod data;
mod files;
mod train;

#[derive(Parser)]
#[command(name = "fairbounty", version, about = "Bias bounties over pointer decision lists")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    Synth(SynthArgs),
    /// Split a CSV into seeded random parts.
    Split(SplitArgs),
    /// Train a pointer decision list with repeated certificate finding.
    Train(TrainArgs),
    /// Replay a directory of submissions through the bounty checker.
    Audit(AuditArgs),
    /// Run the bounty service.
    Serve(ServeArgs),
    /// Per-level, per-group loss table of a model on datasets.
    Report(ReportArgs),
}

/// How CSV inputs are read.
#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Feature schema JSON; inferred from the first file when absent.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.2, 0.1])]
    fractions: Vec<f64>,
    /// Part names; defaults to train,holdout,test for three parts.
    #[arg(long, value_delimiter = ',')]
    names: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    input: DataArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file with epsilon, finder, max_depth, min_leaf and seed; flags
    /// override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    finder: Option<FinderKind>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base predictor document; a stump fit on the data when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// JSON array of group predictors (bruteforce finder).
    #[arg(long)]
    groups: Option<PathBuf>,
    /// JSON array of model predictors (bruteforce finder).
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    input: DataArgs,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    holdout: PathBuf,
    /// Public training split; used for the default base model and
    /// `--fit-per-group`.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Public test split for per-group losses in the report.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Directory of `{"group": .., "model": ..}` documents, read in file-name
    /// order.
    #[arg(long)]
    submissions: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Defaults to the number of submission files.
    #[arg(long)]
    max_submissions: Option<usize>,
    /// Skip monotonicity repairs.
    #[arg(long)]
    plain: bool,
    /// Before auditing, write one submission per group in `--groups`, with a
    /// tree fit on the group's training rows (`depth=N`).
    #[arg(long, value_name = "depth=N")]
    fit_per_group: Option<String>,
    /// JSON array of group predictors for `--fit-per-group`.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    input: DataArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured port.
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct ReportArgs {
    /// Pointer decision list or plain predictor document.
    #[arg(long)]
    model: PathBuf,
    /// `name=path` pairs.
    #[arg(long = "data", required = true)]
    datasets: Vec<String>,
    /// Writes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    input: DataArgs,
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = fairbounty_service::ServiceConfig::load(&args.config)?;
    if let Some(port) = args.port {
        config.port = port;
    }
    let program = fairbounty_service::Program::open(config)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(fairbounty_service::serve(program, |addr| {
        use std::io::Write;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    }))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => data::synth(a),
        Command::Split(a) => data::split(a),
        Command::Train(a) => train::run(a),
        Command::Audit(a) => audit::run(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => data::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
