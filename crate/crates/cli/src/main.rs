//! `lvglass`: command-line front end of the `lvglass` library.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use output::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lvglass::Error),
    #[error("{0}")]
    NotConverged(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(lvglass::Error::InvalidParameter(_) | lvglass::Error::Divergent(_)) => 2,
            CliError::Core(_) | CliError::NotConverged(_) => 3,
            CliError::Io(_) | CliError::Json(_) | CliError::Csv(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lvglass", version = SCHEMA_VERSION, about = "Lotka-Volterra glass numerics")]
pub struct Cli {
    /// Flat key = value file; flags on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for replicas and chains.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: $LVGLASS_OUT_DIR, else the working directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Primary output file; overrides the default name in the output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Master seed of stochastic commands.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Realizability frontier λ+(α, κ) = 1 on a κ grid.
    Frontier(FrontierArgs),
    /// Heuristic λ+max over deformed-GOE draws.
    LambdaSim(LambdaSimArgs),
    /// Euler simulation of the stochastic dynamics.
    Sde(SdeArgs),
    /// Metropolis sampling of the Gibbs measure.
    GibbsSample(GibbsArgs),
    /// Disorder-averaged per-site log partition function.
    FreeEnergy(FreeEnergyArgs),
    /// One evaluation of the Parisi objective from a JSON argument file.
    ParisiEval(ParisiEvalArgs),
    /// Saddle search of the Parisi variational formula.
    ParisiOpt(ParisiOptArgs),
    /// Monte-Carlo check of the cascade representation against the recursion.
    RpcVerify(RpcArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct FrontierArgs {
    /// `start:stop:step`, inclusive of `stop` up to rounding.
    #[arg(long, default_value = "0.05:0.7:0.05")]
    pub kappa_grid: String,
    #[arg(long, value_enum, default_value = "csv")]
    #[serde(skip)]
    pub format: Format,
}

/// Model constants shared by most commands.
#[derive(Debug, Args, Clone, Copy, serde::Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 0.5)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct LambdaSimArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0.01)]
    pub eps_sigma: f64,
    #[arg(long, value_enum, default_value = "csv")]
    #[serde(skip)]
    pub format: Format,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SdeArgs {
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    /// Time discarded before averaging.
    #[arg(long, default_value_t = 0.0)]
    pub burn_in: f64,
    /// Comma list of mean, second-moment, logmean (applied to every coordinate).
    #[arg(long, default_value = "mean,second-moment,logmean")]
    pub observables: String,
    /// Steps between recorded states of the trace.
    #[arg(long, default_value_t = 100)]
    pub record_every: usize,
    /// Common initial value of all coordinates.
    #[arg(long, default_value_t = 1.0)]
    pub x0: f64,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct GibbsArgs {
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// orthant, box:A or ball:A.
    #[arg(long, default_value = "orthant")]
    pub domain: String,
    /// External field h.
    #[arg(long)]
    pub field: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 5000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 40000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Also write every retained sample to a CSV next to the JSON output.
    #[arg(long)]
    pub write_samples: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FreeEnergyMethod {
    Thermo,
    Quadrature,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct FreeEnergyArgs {
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0.01)]
    pub eps_sigma: f64,
    #[arg(long, value_enum, default_value = "thermo")]
    pub method: FreeEnergyMethod,
    /// Equally spaced coupling points of the thermodynamic integration.
    #[arg(long, default_value_t = 21)]
    pub points: usize,
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long, default_value_t = 5000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 40000)]
    pub samples: usize,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ParisiEvalArgs {
    /// JSON file with temperature or beta, kappa, alpha, phi, a, h, gamma, lambdas, atoms.
    #[arg(long)]
    pub args: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ParisiOptArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Number of levels K of the Parisi measure.
    #[arg(long, default_value_t = 1)]
    pub levels: usize,
    /// Gauss–Hermite nodes per level.
    #[arg(long, default_value_t = 40)]
    pub order: usize,
    #[arg(long, default_value_t = 300)]
    pub max_evals: usize,
    #[arg(long, default_value_t = 40)]
    pub inner_sweeps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeafArg {
    Constant,
    Linear,
    Telescoped,
    MuBeta,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct RpcArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Comma list λ_0 < … < λ_{K−1}.
    #[arg(long, default_value = "0.3,0.6")]
    pub lambdas: String,
    /// Comma list b_0 = 0 ≤ … ≤ b_K.
    #[arg(long, default_value = "0,0.8,1.5")]
    pub atoms: String,
    #[arg(long, value_enum, default_value = "mu-beta")]
    pub leaf: LeafArg,
    /// Constant leaf value or linear leaf offset.
    #[arg(long, default_value_t = 0.0)]
    pub value: f64,
    #[arg(long, default_value_t = 5.0)]
    pub a: f64,
    #[arg(long, default_value_t = 0.0)]
    pub h: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Branching cap N per node.
    #[arg(long, default_value_t = 1000)]
    pub branching: usize,
    #[arg(long, default_value_t = 200)]
    pub replicas: usize,
}

fn run() -> Result<(), CliError> {
    let raw: Vec<String> = std::env::args().collect();
    let merged = config::merge(raw, &Cli::command())?;
    let cli = match Cli::try_parse_from(merged) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            // help and version exit 0, usage errors 2
            std::process::exit(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    commands::dispatch(&cli)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lvglass: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
