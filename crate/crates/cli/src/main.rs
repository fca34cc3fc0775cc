use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dog_cli::commands::{self, Axis};
use dog_cli::config::RunConfig;
use dog_cli::output::resolve_output_dir;
use dog_cli::CliResult;
use dog_core::{MetricReport, Strategy};

/// Guided diffusion sampling on toy Gaussian-mixture targets.
#[derive(Debug, Parser)]
#[command(name = "dog", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    config: Option<PathBuf>,
    /// Output directory; overrides DOG_OUTPUT_DIR and the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy MLP denoiser and compare it with the analytic model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample trajectories for one condition and one guidance setting.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        gs: Option<f64>,
        /// Number of seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Sweep guidance strategies and scales over the evaluation conditions.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        gs_list: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        /// Seeds per condition.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Compare DOG variants along one axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        gs: Option<f64>,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

fn load(common: &Common) -> CliResult<(RunConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = resolve_output_dir(common.out.as_deref(), cfg.output_dir.as_deref());
    Ok((cfg, out))
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_reports(reports: &[MetricReport], out: &Path) {
    let mut text = format!("{}\n", MetricReport::CSV_HEADER);
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    text.push_str(&format!("outputs written to {}\n", out.display()));
    emit(&text);
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common, epochs } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            let start = Instant::now();
            let outcome = commands::train(&cfg, &out)?;
            emit(&format!(
                "first_mse={} final_mse={} ratio={:.4} disagreement={:.4} (threshold {})\ncheckpoint: {}\nelapsed: {:.1}s\n",
                outcome.epoch_losses[0],
                outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
                outcome.loss_ratio(),
                outcome.disagreement,
                outcome.disagreement_threshold,
                outcome.checkpoint.display(),
                start.elapsed().as_secs_f64()
            ));
            if outcome.disagreement > outcome.disagreement_threshold {
                eprintln!("warning: disagreement with the analytic model exceeds the configured threshold");
            }
        }
        Command::Sample {
            common,
            strategy,
            gs,
            seeds,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(s) = strategy {
                cfg.guidance.strategy = s;
            }
            if let Some(g) = gs {
                cfg.guidance.gs = g;
            }
            if let Some(n) = seeds {
                cfg.sampling.seeds = n;
            }
            let report = commands::sample(&cfg, &out)?;
            print_reports(&[report], &out);
        }
        Command::Compare {
            common,
            gs_list,
            strategies,
            seeds,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(g) = gs_list {
                cfg.compare.gs_list = g;
            }
            if let Some(s) = strategies {
                cfg.compare.strategies = s;
            }
            if let Some(n) = seeds {
                cfg.sampling.seeds = n;
            }
            let reports = commands::compare(&cfg, &out)?;
            print_reports(&reports, &out);
        }
        Command::Ablate {
            common,
            axis,
            gs,
            seeds,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(g) = gs {
                cfg.ablate.gs = g;
            }
            if let Some(n) = seeds {
                cfg.ablate.seeds = n;
            }
            let reports = commands::ablate(&cfg, axis, &out)?;
            print_reports(&reports, &out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
