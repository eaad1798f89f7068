mod config;
mod reconstruct;
mod tools;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;

const BUILD_ID: &str = if cfg!(debug_assertions) {
    concat!(env!("CARGO_PKG_VERSION"), " (debug build)")
} else {
    concat!(env!("CARGO_PKG_VERSION"), " (release build)")
};

#[derive(Debug)]
pub enum CliError {
    /// Bad or unreadable input; exit code 2.
    Config(String),
    /// A stage failed on valid input; exit code 3.
    Pipeline(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Pipeline(m) => write!(f, "pipeline error: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "skysplat", version = BUILD_ID, about = "Sparse-view satellite reconstruction from RPC imagery")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log level: error, warn, info, debug or trace. RUST_LOG wins when set.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Heights, transient masks, aggregation and DSM from a view set.
    Reconstruct {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Generate a synthetic oracle bundle plus a ready-to-run auto.json.
    Synth(tools::SynthArgs),
    /// Score a DSM against ground truth, or compute losses with --losses.
    Eval(tools::EvalArgs),
    /// Composite Gaussians through a fitted pinhole or a nadir grid.
    Render(tools::RenderArgs),
    /// RPC utilities.
    Rpc {
        #[command(subcommand)]
        command: RpcCommand,
    },
    /// Transient masks and confidence maps only.
    Mask {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only this view (default: all).
        #[arg(long)]
        view: Option<usize>,
        #[command(flatten)]
        over: Overrides,
    },
}

#[derive(Debug, Subcommand)]
enum RpcCommand {
    /// Local pinhole approximation of an RPC over a pixel patch.
    FitPinhole(tools::FitPinholeArgs),
}

fn init_logging(level: &str) {
    env_logger::Builder::new()
        .parse_filters(level)
        .parse_env("RUST_LOG")
        .format(|buf, record| {
            let stage = record.target().rsplit("::").next().unwrap_or("");
            writeln!(buf, "{} {} {}", record.level(), stage, record.args())
        })
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Reconstruct { config, over } => reconstruct::reconstruct(config.as_deref(), &over),
        Command::Mask { config, view, over } => reconstruct::mask(config.as_deref(), view, &over),
        Command::Synth(a) => tools::synth(&a),
        Command::Eval(a) => tools::eval(&a),
        Command::Render(a) => tools::render(&a),
        Command::Rpc {
            command: RpcCommand::FitPinhole(a),
        } => tools::fit_pinhole(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log_level);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR cli {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
