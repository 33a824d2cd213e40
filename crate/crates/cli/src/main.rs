//! Command-line front end for the granular-ball pseudo-domain toolkit.
//! Exit codes: 0 success, 2 bad arguments, 3 file problems, 4 numeric or
//! precondition failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod files;
mod ops;

pub use files::{CmdError, CmdResult, Phase};

#[derive(Parser)]
#[command(
    name = "gbdomain",
    version,
    about = "Granular-ball latent domain discovery toolkit"
)]
struct Cli {
    /// Worker threads; falls back to GBDOMAIN_THREADS, then all cores
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cluster a descriptor file into pseudo-domains
    Discover(DiscoverArgs),
    /// Relabel an assignment to best match a previous one
    Align(AlignArgs),
    /// Stratification, agreement, and churn reports for finished runs
    Eval(EvalArgs),
    /// Division runtime scaling sweep
    Bench(BenchArgs),
    /// Materialize a synthetic mixture spec into a descriptor file
    Synth(SynthArgs),
    /// Loss values and gradients for a serialized batch
    Losses(LossesArgs),
}

#[derive(Args, Clone)]
pub struct DivisionFlags {
    /// Split acceptance margin ("inf" allowed)
    #[arg(long, default_value_t = 1.05)]
    pub tau: f64,
    /// Weight-update exponent
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Weight-update smoothing constant
    #[arg(long, default_value_t = 1e-12)]
    pub eps: f64,
    /// Maximum division depth
    #[arg(long, default_value_t = 12)]
    pub dmax: usize,
    /// Smallest ball still eligible for splitting
    #[arg(long, default_value_t = 4)]
    pub min_ball: usize,
}

#[derive(Args)]
pub struct DiscoverArgs {
    /// Descriptor file, binary or CSV (detected by content)
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for labels.csv and meta.json
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pseudo-domains
    #[arg(long)]
    pub k: Option<usize>,
    /// Choose K from the sample count
    #[arg(long)]
    pub k_auto: bool,
    /// K preset by dataset tag: sha, shb, qnrf, sha+shb
    #[arg(long)]
    pub dataset: Option<String>,
    #[command(flatten)]
    pub division: DivisionFlags,
    /// Projection dimensionality before division
    #[arg(long)]
    pub pca_d: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Previous run (directory or labels.csv) to align against
    #[arg(long)]
    pub prev: Option<PathBuf>,
    /// Weight ball centers by member count in the final clustering
    #[arg(long)]
    pub size_weighted: bool,
    /// Also write the leaf balls as balls.json
    #[arg(long)]
    pub emit_balls: bool,
    /// Omit wall-clock timestamps from metadata
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Args)]
pub struct AlignArgs {
    /// Assignment to relabel (directory or labels.csv)
    #[arg(long)]
    pub input: PathBuf,
    /// Reference assignment
    #[arg(long)]
    pub prev: PathBuf,
    /// Output directory for aligned.csv and permutation.json
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Descriptor file carrying ground-truth counts (and domains if known)
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for report.json and report.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Finished runs in epoch order (directories or labels.csv files)
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Output directory for bench.json and bench.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Sample counts to time, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = vec![1000, 2000, 4000, 8000])]
    pub sizes: Vec<usize>,
    /// Descriptor dimensionality
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    /// Timing repetitions per size (best is kept)
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub division: DivisionFlags,
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DescFormat {
    Bin,
    Csv,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Mixture spec JSON file
    #[arg(long)]
    pub spec: PathBuf,
    /// Output descriptor file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DescFormat::Bin)]
    pub format: DescFormat,
    /// Apply the spec's drift for this epoch before writing
    #[arg(long)]
    pub epoch: Option<u32>,
}

#[derive(Args)]
pub struct LossesArgs {
    /// JSON file with batch, pred, gt, and optional weights/eps
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for report.json
    #[arg(long)]
    pub out: PathBuf,
    /// Verify analytic gradients against finite differences
    #[arg(long)]
    pub check_grads: bool,
    #[arg(long)]
    pub no_timestamp: bool,
}

fn run(cli: Cli) -> CmdResult<()> {
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var("GBDOMAIN_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| {
                CmdError::args("GBDOMAIN_THREADS must be a non-negative integer")
            })?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        // A second build_global in one process is harmless: the first pool wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Cmd::Discover(a) => ops::discover(a),
        Cmd::Align(a) => ops::align(a),
        Cmd::Eval(a) => ops::eval(a),
        Cmd::Bench(a) => ops::bench(a),
        Cmd::Synth(a) => ops::synth(a),
        Cmd::Losses(a) => ops::losses(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit_code())
        }
    }
}
