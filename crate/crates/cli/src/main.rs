//! `capclust` command-line interface.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Covariate-assisted clustering of subjects from their covariance matrices")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Extract projection components for a fixed K.
    Fit(FitArgs),
    /// Choose K by average BIC over the accepted components.
    Select(SelectArgs),
    /// Percentile bootstrap intervals for the fitted coefficients.
    Bootstrap(BootstrapArgs),
    /// Score a fit against a simulation truth.
    Evaluate(EvaluateArgs),
    /// Monte-Carlo comparison of CAPclust and the baselines.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
pub struct DataArgs {
    /// NDJSON with `Y` (observations) or `T` and `S` per subject.
    #[arg(long)]
    pub data: PathBuf,
    /// CSV `id,x1,...,w1,...`; intercepts are implicit.
    #[arg(long)]
    pub covariates: PathBuf,
    /// Remove each subject's column means before computing covariances.
    #[arg(long)]
    pub center: bool,
    /// Center and scale each column to unit variance.
    #[arg(long)]
    pub scale: bool,
}

#[derive(Args)]
pub struct EmArgs {
    /// JSON file with EM settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dfd_threshold: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON simulation settings; defaults to the two-dimension design.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Design preset used when no config is given.
    #[arg(long, default_value = "two-dims", value_parser = ["two-dims", "two-dims-intercept", "dim2", "dim2-intercept"])]
    pub preset: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub max_components: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 4)]
    pub k_max: usize,
    #[arg(long, default_value_t = 1)]
    pub max_components: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Component set written by `fit`; fitted afresh when absent.
    #[arg(long)]
    pub components: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub max_components: usize,
    #[arg(long = "B", default_value_t = 200)]
    pub b: usize,
    /// Two-sided miss rate of the intervals.
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub restarts_per_replicate: usize,
    /// Coefficient contrast `name=c0,c1,...` over the `x` terms; repeatable.
    #[arg(long = "contrast")]
    pub contrasts: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Component set written by `fit`.
    #[arg(long)]
    pub components: PathBuf,
    /// `truth.json` written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchmarkArgs {
    /// JSON study settings (simulation, EM, methods, replications).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_components: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of capclust, kmeans_lowtri, kmeans_log,
    /// hierarchical_lowtri, hierarchical_log.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Labels produced elsewhere, `name=path` to a CSV with columns
    /// `replication,dim,subject,cluster`; repeatable.
    #[arg(long = "external-labels")]
    pub external_labels: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Select(a) => commands::select(a),
        Command::Bootstrap(a) => commands::bootstrap(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Benchmark(a) => commands::benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
