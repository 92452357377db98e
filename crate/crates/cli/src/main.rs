//! `vsda`: generate synthetic benchmarks, train, evaluate, run ablations and
//! plot training curves.
//!
//! Exit status: 0 on success, 1 for usage and configuration errors, 2 for
//! missing or malformed data, 3 for numerical failures.

mod commands;
mod plot;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use vsda::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "vsda", version, about = "Video segmentation domain adaptation on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda_u=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source, target and held-out target datasets.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an identical configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (one split, e.g. `data/eval`).
        #[arg(long)]
        data: PathBuf,
        /// Directory for `report.json`, `report.txt` and the config echo.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pixel stride for the feature-variance statistics (0 disables).
        #[arg(long, default_value_t = 4)]
        feature_stride: usize,
    },
    /// Train several modes with otherwise identical settings and tabulate them.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "source_only,sa,sta,jt,ctcr,itcr,davsn")]
        modes: Vec<String>,
        /// Seeds to average over; each run uses it for both `seed` and `data_seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Render loss and mIoU curves from a metrics log as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<vsda::Error>().map(vsda::Error::kind) {
        Some(ErrorKind::Usage) => 1,
        Some(ErrorKind::Numerical) => 3,
        Some(ErrorKind::Data) | None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen { cfg } => commands::generate(&cfg),
        Command::Train { cfg, resume } => commands::train(&cfg, resume),
        Command::Eval {
            checkpoint,
            data,
            out,
            feature_stride,
        } => commands::eval(&checkpoint, &data, out.as_deref(), feature_stride),
        Command::Ablate { cfg, modes, seeds } => commands::ablate(&cfg, &modes, &seeds),
        Command::Plot { metrics, out } => plot::plot(&metrics, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
