//! The `cef` command line: subcommands compose through files only.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, malformed config
//! or metadata), 2 runtime fault (non-finite values, io failures).

use std::path::PathBuf;
use std::sync::Once;

use clap::{Parser, Subcommand};

use crate::config::load_config;
use crate::error::{HarnessError, Result};
use crate::pipeline;
use crate::plot;

#[derive(Parser, Debug)]
#[command(
    name = "cef",
    about = "Diffusion-based continuous ensemble forecasting on synthetic systems",
    disable_help_subcommand = true
)]
struct Cli {
    /// Master seed override (takes precedence over the config's seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output path (file or directory, per subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured system and write train/val/test splits.
    GenerateData,
    /// Train the diffusion denoiser (or the deterministic baseline).
    Train {
        /// Training split file.
        #[arg(long)]
        data: PathBuf,
        /// Validation split file (optional).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Train the MSE baseline instead of the diffusion model.
        #[arg(long)]
        deterministic: bool,
    },
    /// Sample ensemble forecasts for cases drawn from a dataset split.
    Forecast {
        /// Split providing initial conditions.
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint (omit for the analytic backend).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a forecast container against truth and write the metric CSV.
    Evaluate {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Draw one metric of a metrics CSV as an SVG curve (plus sidecar CSV).
    Plot {
        #[arg(long)]
        metric: String,
        /// Metrics CSV produced by `evaluate`.
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck,
    /// Run the quick invariant suite.
    Selftest,
}

static THREAD_POOL: Once = Once::new();

/// Honor the CEF_THREADS cap once per process.
fn init_threads() {
    THREAD_POOL.call_once(|| {
        if let Ok(v) = std::env::var("CEF_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

fn require_config(cli: &Cli) -> Result<crate::config::LoadedConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::validation("this subcommand needs --config"))?;
    load_config(path)
}

fn require_out(cli: &Cli) -> Result<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| HarnessError::validation("this subcommand needs --out"))
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData => {
            let loaded = require_config(&cli)?;
            let out = require_out(&cli)?;
            let files = pipeline::run_generate(&loaded, &out, cli.seed)?;
            println!("wrote {}", files.train.display());
            println!("wrote {}", files.val.display());
            println!("wrote {}", files.test.display());
            Ok(())
        }
        Command::Train {
            data,
            val,
            deterministic,
        } => {
            let loaded = require_config(&cli)?;
            let out = require_out(&cli)?;
            let summary = if *deterministic {
                pipeline::run_train_deterministic(&loaded, data, &out, cli.seed)?
            } else {
                pipeline::run_train(&loaded, data, val.as_deref(), &out, cli.seed)?
            };
            println!(
                "wrote {} (final train loss {:.6})",
                summary.checkpoint.display(),
                summary.final_train_loss
            );
            if let (Some(v), Some(o)) = (summary.validation_loss, summary.oracle_validation_loss)
            {
                println!("validation loss {v:.6} (oracle floor {o:.6})");
            } else if let Some(v) = summary.validation_loss {
                println!("validation loss {v:.6}");
            }
            Ok(())
        }
        Command::Forecast { data, checkpoint } => {
            let loaded = require_config(&cli)?;
            let out = require_out(&cli)?;
            pipeline::run_forecast(&loaded, data, checkpoint.as_deref(), &out, cli.seed)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate { forecast, truth } => {
            let loaded = require_config(&cli)?;
            let out = require_out(&cli)?;
            let report = pipeline::run_evaluate(&loaded, forecast, truth, &out)?;
            println!("wrote {} ({} rows)", out.display(), report.rows.len());
            Ok(())
        }
        Command::Plot { metric, input } => {
            let out = require_out(&cli)?;
            let csv = std::fs::read_to_string(input)?;
            let series = plot::series_from_metrics_csv(&csv, metric)?;
            plot::write_metric_plot(&out, metric, &series)?;
            println!("wrote {} and {}", out.display(), out.with_extension("csv").display());
            Ok(())
        }
        Command::Gradcheck => {
            let worst = pipeline::run_gradcheck(cli.seed.unwrap_or(17), 100)?;
            println!("gradcheck: worst relative error {worst:.3e} over 100 probes");
            if worst > 1e-5 {
                return Err(HarnessError::runtime(format!(
                    "gradient check failed: {worst:.3e} > 1e-5"
                )));
            }
            Ok(())
        }
        Command::Selftest => {
            let passed = pipeline::run_selftest()?;
            for name in passed {
                println!("selftest: {name} ok");
            }
            Ok(())
        }
    }
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders usage text; unknown flags and bad values are
            // validation errors (exit 1).
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_exit_one() {
        assert_eq!(run(["cef", "selftest", "--bogus-flag"]), 1);
        assert_eq!(run(["cef", "no-such-subcommand"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["cef", "--help"]), 0);
    }

    #[test]
    fn missing_config_is_validation_error() {
        assert_eq!(run(["cef", "generate-data", "--out", "/tmp/x"]), 1);
    }

    #[test]
    fn gradcheck_passes() {
        assert_eq!(run(["cef", "gradcheck"]), 0);
    }
}
