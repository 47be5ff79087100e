//! The `vffm` command line.
//!
//! Exit codes: 0 success, 1 configuration or format error, 2 I/O or dataset
//! error, 3 numeric failure, 4 verification failure.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::attention::VfMode;
use crate::error::Error;
use crate::train::data::Split;

pub use config::{Precision, RunConfig, DATA_ROOT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Dataset(_) => EXIT_IO,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::InvalidShape(_)
        | Error::ShapeMismatch(_)
        | Error::Contract(_)
        | Error::ResourceLimit(_)
        | Error::Config(_)
        | Error::Format { .. } => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "vffm", version, about = "Vision Fastformer U-Net for binary segmentation")]
pub struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_name = "f32|f64")]
    pub precision: Option<Precision>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset and write a run directory.
    Train(TrainArgs),
    /// Score saved weights on a dataset split.
    Eval(EvalArgs),
    /// Write a binary mask for one image.
    Predict(PredictArgs),
    /// Parameter and FLOP counts of the configured network.
    Summary,
    /// Time the attention module across sequence lengths (CSV on stdout).
    BenchAttn(BenchArgs),
    /// Compare tape gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root holding images/ and masks/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory; supplies config.resolved and weights.bin.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// PNG or PGM path for the {0, 255} mask.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence lengths H·W; each must be a perfect square.
    #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384,65536")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long, default_value_t = crate::attention::DEFAULT_POOLED_LEN)]
    pub d: usize,
    #[arg(long, default_value = "factored")]
    pub mode: VfMode,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub target: crate::verify::GradTarget,
    #[arg(long, default_value_t = crate::verify::DEFAULT_EPS)]
    pub eps: f64,
    /// Corrupts the sigmoid backward rule; for testing the checker.
    #[arg(long, hide = true)]
    pub fault: bool,
}

/// Parses `args` (program name first) and runs the command. Output goes to
/// `out`, diagnostics to `err`; the return value is the exit code.
pub fn run<I, S>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match commands::dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
