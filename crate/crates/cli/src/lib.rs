//! Command-line pipeline over the core library: simulation, index
//! benchmarking, deblurring, training, rendering and evaluation.

pub mod commands;
pub mod config;
pub mod e2e;
pub mod manifest;

use clap::Parser;

/// Exit codes: 0 success, 2 configuration/validation error, 1 runtime
/// failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Error wrapper distinguishing configuration problems (exit 2) from
/// runtime failures (exit 1).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ev4d_core::Error> for CliError {
    fn from(e: ev4d_core::Error) -> Self {
        match e {
            ev4d_core::Error::InvalidInput(_) | ev4d_core::Error::InvalidStream(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "ev4d",
    about = "Event-based 4D scene reconstruction pipeline",
    version
)]
pub struct Cli {
    /// Override the config/default RNG seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Subcommand)]
pub enum Command {
    /// Simulate multi-view event streams and reference frames for a toy scene
    Simulate(commands::simulate::SimulateArgs),
    /// Benchmark fast decayed accumulation queries against the naive scan
    IndexBench(commands::index_bench::IndexBenchArgs),
    /// Deblur a frame through events and synthesize frames at reference times
    Deblur(commands::deblur::DeblurArgs),
    /// Train a segment model from events and sparse RGB
    Train(commands::train::TrainArgs),
    /// Render novel views across trained segment checkpoints
    Render(commands::render::RenderArgs),
    /// Compare rendered frames against ground truth (PSNR/SSIM)
    Eval(commands::eval::EvalArgs),
    /// Closed-form and Monte Carlo noise accumulation statistics
    DecayStats(commands::decay_stats::DecayStatsArgs),
    /// Fit a linear camera response to exposure samples
    CrfFit(commands::crf::CrfFitArgs),
    /// Full simulate/train/render/eval pipeline on the bundled toy scene
    E2eToy(commands::e2e_toy::E2eToyArgs),
}

/// Parses argv and runs the selected subcommand, mapping errors to exit
/// codes.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error display
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate::run(args, cli.seed),
        Command::IndexBench(args) => commands::index_bench::run(args, cli.seed),
        Command::Deblur(args) => commands::deblur::run(args),
        Command::Train(args) => commands::train::run(args, cli.seed),
        Command::Render(args) => commands::render::run(args, cli.seed),
        Command::Eval(args) => commands::eval::run(args),
        Command::DecayStats(args) => commands::decay_stats::run(args, cli.seed),
        Command::CrfFit(args) => commands::crf::run(args),
        Command::E2eToy(args) => commands::e2e_toy::run(args, cli.seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
