//! `pitta`: pretrain, generate streams, adapt online, and report.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 input data,
//! 5 numerical failure, 6 file-system error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pitta_core::adapt::{Lambda, SelectionSpec};
use pitta_core::scene::DomainShift;
use pitta_core::{Error, ErrorCategory};

#[derive(Parser, Debug)]
#[command(name = "pitta", version, about = "Instance-aware test-time adaptation for monocular depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a depth network on the clean source scene and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Number of optimisation steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render a synthetic stream into a frame directory.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate-then-adapt over a stream and write the run report.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Also save the adapted network to this path.
        #[arg(long)]
        save_adapted: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a stream without adapting.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// One adaptation run per λ value.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Comma-separated λ values; `inf` trains on the edge loss alone.
        #[arg(long, default_value = "0,0.1,0.2,0.5,1,inf", value_delimiter = ',')]
        grid: Vec<Lambda>,
    },
    /// One adaptation run per parameter selection.
    SweepSelection {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Semicolon-separated selections, e.g. `bn-encoder-all;conv:0.5+bn:1`.
        #[arg(long, default_value = "bn-encoder-all;bn-last:0.5;conv:0.5+bn:1;conv:1+bn:1", value_delimiter = ';')]
        grid: Vec<SelectionSpec>,
    },
    /// Rebuild summary and plot tables from a recorded step log.
    Report {
        /// A `steps.jsonl` file or the run directory containing it.
        #[arg(long)]
        input: PathBuf,
        /// Directory for the rebuilt tables.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment configuration (`.toml` or `.json`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network seed for `pretrain`; target-stream seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Frame directory to read instead of rendering a synthetic stream.
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Number of stream frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Network checkpoint to load; `pretrain` writes here when `--out` is absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint for `pretrain`, frame directory for `generate`, report directory otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `none`, `fog:<strength>[:<airlight>]`, `rain:<density>[:<seed>]`, `brightness:<factor>`.
    #[arg(long)]
    domain_shift: Option<DomainShift>,
}

#[derive(Args, Debug, Clone, Default)]
struct HyperArgs {
    /// Edge-loss weight λ; `inf` trains on the edge loss alone.
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<String>,
    /// SGD learning rate α.
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<f64>,
    /// Odd median window size.
    #[arg(long)]
    median_window: Option<usize>,
    /// Adapted parameters, e.g. `bn-encoder-all`, `bn-last:0.5`, `conv:0.25+bn:1`.
    #[arg(long)]
    select: Option<SelectionSpec>,
    /// Run the α = 0 baseline.
    #[arg(long)]
    no_adapt: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Usage => 2,
        ErrorCategory::Config => 3,
        ErrorCategory::Input => 4,
        ErrorCategory::Numeric => 5,
        ErrorCategory::Io => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
