use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use funcspace::funcae::Gates;
use funcspace::netrep::ActivationKind;

mod commands;
mod config;
mod error;

use error::{usage, CliError};

/// Functional embeddings of sparse MLPs: corpus generation, autoencoder
/// training and evaluation, and embedding-space search for compact networks.
#[derive(Parser, Debug)]
#[command(name = "funcspace", version)]
struct Cli {
    /// Worker threads (default: FUNCSPACE_THREADS, else all cores). Results
    /// do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate random sparse MLPs plus the shared evaluation grid.
    GenMlps(GenArgs),
    /// Train the multi-scale autoencoder on a generated corpus.
    TrainAe(TrainArgs),
    /// Median MPE of every (encoder depth, decoder) pair on fresh networks.
    EvalAe(EvalArgs),
    /// Search the embedding space for networks that fit a dataset.
    Search(SearchArgs),
    /// Run one search per sparsity weight and write the tradeoff curve.
    ScanAlpha(ScanArgs),
    /// Evaluate two 3-input networks on a 2-D slice with one input fixed.
    ExportSurface(SurfaceArgs),
    /// Check every network of a corpus for reachability and weight bounds.
    Audit(AuditArgs),
    /// Build an FDS1 search dataset from a known network.
    MakeDataset(DatasetArgs),
}

fn parse_activation(s: &str) -> Result<ActivationKind, String> {
    s.parse()
}

#[derive(Args, Debug)]
struct GenArgs {
    /// sigmoid, leaky-relu or linear.
    #[arg(long, value_parser = parse_activation)]
    activation: Option<ActivationKind>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file; its `[gen]` table mirrors the generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Smaller networks: n_max 5, hidden sizes 2..=5.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    hidden_min: Option<usize>,
    #[arg(long)]
    hidden_max: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory written by gen-mlps.
    #[arg(long)]
    data: PathBuf,
    /// `min` or `p:<float>`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint directory; rewritten after every epoch.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    d_z: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Networks per gradient tape.
    #[arg(long)]
    chunk: Option<usize>,
    /// soft or straight-through.
    #[arg(long, value_enum)]
    gates: Option<GatesArg>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Test networks to generate; they are grouped by depth.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate freshly initialised parameters (seeded by --seed) instead.
    #[arg(long)]
    untrained: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum GatesArg {
    Soft,
    StraightThrough,
}

impl From<GatesArg> for Gates {
    fn from(g: GatesArg) -> Self {
        match g {
            GatesArg::Soft => Gates::Soft,
            GatesArg::StraightThrough => Gates::StraightThrough,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum SoftCountArg {
    PerElement,
    Literal,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum OptimizerArg {
    Gd,
    Adam,
}

#[derive(Args, Debug)]
struct SearchOpts {
    #[arg(long)]
    ckpt: PathBuf,
    /// FDS1 dataset with train/val/test splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr_z: Option<f64>,
    #[arg(long)]
    lr_t: Option<f64>,
    /// Rows per step; 0 uses the whole train split.
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    soft_count: Option<SoftCountArg>,
    #[arg(long, value_enum)]
    gates: Option<GatesArg>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    opts: SearchOpts,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated 1-based decoder depths (default: all).
    #[arg(long, value_delimiter = ',')]
    decoders: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[command(flatten)]
    opts: SearchOpts,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    /// Decoder depth to scan (default: every decoder, one file each).
    #[arg(long)]
    decoder: Option<usize>,
}

#[derive(Args, Debug)]
struct SurfaceArgs {
    /// Exactly two network files.
    #[arg(long = "mlp", num_args = 1, required = true)]
    mlps: Vec<PathBuf>,
    /// `dim=<1-based input>,value=<float>`.
    #[arg(long, default_value = "dim=3,value=0.5")]
    fix: String,
    #[arg(long, default_value_t = 50)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    data: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Label rows with this network; otherwise one is generated.
    #[arg(long)]
    mlp: Option<PathBuf>,
    #[arg(long, value_parser = parse_activation, default_value = "linear")]
    activation: ActivationKind,
    /// Hidden layers of the generated network.
    #[arg(long, default_value_t = 1)]
    depth: usize,
    /// Accepted non-zero weight counts of the generated network, `lo:hi`.
    #[arg(long, default_value = "14:20")]
    nonzero: String,
    #[arg(long, default_value_t = 5)]
    n_max: usize,
    /// Removal fractions of the generated network; the default keeps every
    /// link, since heavier pruning cannot reach the default count range.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    removal: Vec<f64>,
    #[arg(long, default_value_t = 20000)]
    rows: usize,
    /// Train:val:test ratio.
    #[arg(long, default_value = "5:3:2")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for data.fds and generator.json.
    #[arg(long)]
    out: PathBuf,
}

fn setup_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FUNCSPACE_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| usage(format!("FUNCSPACE_THREADS=`{v}` is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    setup_threads(cli.threads)?;
    match cli.command {
        Command::GenMlps(a) => commands::gen_mlps(a),
        Command::TrainAe(a) => commands::train_ae(a),
        Command::EvalAe(a) => commands::eval_ae(a),
        Command::Search(a) => commands::search(a),
        Command::ScanAlpha(a) => commands::scan_alpha(a),
        Command::ExportSurface(a) => commands::export_surface(a),
        Command::Audit(a) => commands::audit(a),
        Command::MakeDataset(a) => commands::make_dataset(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code() as u8)
        }
    }
}
