//! The `gcrf` command line: colorize from edits, check gradients, train,
//! sample and evaluate. [`run`] is the whole program minus process exit, so
//! tests can drive it in-process.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;

use clap::{Args, Parser, Subcommand};
use gcrf_core::gradcheck::Mutation;

use crate::config::{resolve, ColorizeFlags, ConfigSource, EvalFlags, GradcheckFlags, SampleFlags, TrainFlags};
use crate::error::{CliError, CliResult, EXIT_BAD_INPUT, EXIT_OK};

/// Caps rayon's worker count when set.
pub const THREADS_ENV: &str = "GCRF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gcrf", version, about = "Gaussian-CRF colorization: edits, gradients, training, sampling, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propagate sparse color edits over a gray image.
    Colorize(ColorizeArgs),
    /// Finite-difference check of every analytic gradient path.
    Gradcheck(GradcheckArgs),
    /// Train the toy model and write a checkpoint.
    Train(TrainArgs),
    /// Draw diverse colorizations from a checkpoint.
    Sample(SampleArgs),
    /// Revealed-patch PSNR sweep, optionally with diversity metrics.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ColorizeArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[command(flatten)]
    pub flags: ColorizeFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[command(flatten)]
    pub flags: GradcheckFlags,
    /// Test hook: negate the HOC gradient to show the check catches it.
    #[arg(long, hide = true)]
    pub flip_hoc_sign: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[command(flatten)]
    pub flags: SampleFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[command(flatten)]
    pub flags: EvalFlags,
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // Fails only if a pool already exists, as when tests call `run` twice.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Colorize(a) => {
            let report = commands::colorize(resolve(&a.source, &a.flags)?)?;
            println!(
                "residual {:.3e}  beta {}  revealed {}  clamped {}  {:.1} ms",
                report.residual, report.beta, report.revealed, report.clamped_pixels, report.wall_ms
            );
        }
        Command::Gradcheck(a) => {
            let mutation = if a.flip_hoc_sign { Mutation::FlipHocSign } else { Mutation::None };
            commands::gradcheck(&resolve(&a.source, &a.flags)?, mutation)?;
        }
        Command::Train(a) => {
            let report = commands::train_cmd(resolve(&a.source, &a.flags)?)?;
            let last = report.epochs.last().map(|e| e.loss);
            match last {
                Some(loss) => println!("trained {} stage-1 epochs, final loss {loss:.6}", report.epochs.len()),
                None => println!("no stage-1 epochs; checkpoint holds the initialization"),
            }
        }
        Command::Sample(a) => {
            let report = commands::sample_cmd(&resolve(&a.source, &a.flags)?)?;
            match report.variance {
                Some(v) => println!("{} samples, variance {v:.6}, max residual {:.3e}", report.n, report.max_residual),
                None => println!("{} sample, max residual {:.3e}", report.n, report.max_residual),
            }
        }
        Command::Eval(a) => {
            let s = commands::eval_cmd(&resolve(&a.source, &a.flags)?)?;
            for p in &s.mean {
                println!("|H|={:<4} psnr_rgb {:>7.3} dB  psnr_lab {:>7.3} dB", p.revealed, p.psnr_rgb, p.psnr_lab);
            }
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the exit code. Errors go
/// to stderr as `error[<category>]: <message>`.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
