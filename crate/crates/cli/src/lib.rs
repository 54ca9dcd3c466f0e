//! `pmq`: synthetic problem generation, merging, post-merge quantization,
//! evaluation, and one-axis sweeps, driven by a single JSON config.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_eval, cmd_gen, cmd_merge, cmd_quantize, cmd_sweep, Layout, SweepRow};
pub use config::{Axis, RunConfig, SweepSpec};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "pmq", version, about = "Post-merge quantization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `quant.bits=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate base, experts, calibration and held-out data.
    Gen(Common),
    /// Merge the experts into `merged.safetensors`.
    Merge(Common),
    /// Quantize the merged model; writes the quantized checkpoint and run.json.
    Quantize(Common),
    /// Held-out MSE and deviation diagnostics; writes metrics.csv.
    Eval(Common),
    /// Sweep one axis; writes sweep_<axis>.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        /// Concurrent sweep points.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum AxisArg {
    Bits,
    Alpha,
    Samples,
}

fn resolve(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let mut sets = common.sets.clone();
    sets.extend_from_slice(extra);
    let mut cfg = RunConfig::resolve(common.config.as_deref(), env_seed.as_deref(), &sets)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(c) => cmd_gen(&resolve(c, &[])?),
        Command::Merge(c) => cmd_merge(&resolve(c, &[])?),
        Command::Quantize(c) => cmd_quantize(&resolve(c, &[])?),
        Command::Eval(c) => cmd_eval(&resolve(c, &[])?),
        Command::Sweep { common, axis, jobs } => {
            let mut extra = Vec::new();
            if let Some(a) = axis {
                let name = match a {
                    AxisArg::Bits => "bits",
                    AxisArg::Alpha => "alpha",
                    AxisArg::Samples => "samples",
                };
                extra.push(format!("sweep.axis={name}"));
            }
            if let Some(j) = jobs {
                extra.push(format!("sweep.jobs={j}"));
            }
            let path = cmd_sweep(&resolve(common, &extra)?)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pmq: {e}");
            e.exit_code()
        }
    }
}
