//! The `sscl` command line. Exit codes: 0 on success, 1 for usage and
//! configuration errors, 2 for failures while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sscl_core::stream::{make_synthetic_dataset, SyntheticConfig};

use crate::analyze::analyze_trace;
use crate::config::{ExperimentConfig, SweepAxis};
use crate::error::{HarnessError, Result};
use crate::report::{ensure_writable, load_report, parse_trace, write_report};
use crate::sweep::{run_seeds, run_sweep};

const DEFAULT_OUT: &str = "sscl-out";

#[derive(Debug, Parser)]
#[command(name = "sscl", version, about = "Semi-supervised continual learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one config over its seeds (or a single seed) and write a report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config for every value along one hyperparameter axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of p, alpha, lambda, arch, batch.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0.0,0.15,0.5 or 64x16,128x32.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print cosine and fitness-loss diagnostics for a trace.jsonl file.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Write a synthetic dataset container.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dataset.sscl")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
    },
    /// Rebuild report files from the records in an output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn print_files(out: &mut dyn Write, files: &[PathBuf]) -> Result<()> {
    for f in files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(())
}

fn gen_data(cfg: SyntheticConfig, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_writable(parent)?;
    }
    let ds = make_synthetic_dataset(&cfg)?;
    ds.save(path, Some(&cfg))?;
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out: dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let dir = out_dir(dir, &cfg);
            ensure_writable(&dir)?;
            let records = run_seeds(&cfg)?;
            for r in &records {
                writeln!(
                    out,
                    "seed {}: acc {:.4} bwt {:.4} fwt {:.4}",
                    r.seed, r.metrics.acc, r.metrics.bwt, r.metrics.fwt
                )?;
            }
            print_files(out, &write_report(&dir, &records, None)?)
        }
        Command::Sweep { config, axis, values, out: dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axis = SweepAxis::parse(&axis)?;
            let dir = out_dir(dir, &cfg);
            ensure_writable(&dir)?;
            let report = run_sweep(&cfg, axis, &values)?;
            for p in &report.points {
                match &p.acc {
                    Some(acc) => writeln!(
                        out,
                        "{} = {}: acc {:.4} ± {:.4} over {} runs, {} failed",
                        axis.name(),
                        p.value,
                        acc.mean,
                        acc.std,
                        p.runs,
                        p.failures.len()
                    )?,
                    None => writeln!(out, "{} = {}: all {} runs failed", axis.name(), p.value, p.failures.len())?,
                }
            }
            if report.records.is_empty() {
                return Err(HarnessError::Config("every sweep run failed".into()));
            }
            print_files(out, &write_report(&dir, &report.records, Some(&report.points))?)
        }
        Command::Analyze { trace } => {
            let text = std::fs::read_to_string(&trace).map_err(|source| HarnessError::ConfigRead {
                path: trace.clone(),
                source,
            })?;
            let diagnostics = analyze_trace(&parse_trace(&text)?)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&diagnostics)?)?;
            Ok(())
        }
        Command::GenData {
            seed,
            out: path,
            classes,
            dim,
            samples_per_class,
            test_per_class,
            radius,
        } => {
            let cfg = SyntheticConfig {
                num_classes: classes,
                dim,
                samples_per_class,
                test_per_class,
                radius,
                seed,
            };
            gen_data(cfg, &path)?;
            writeln!(out, "wrote {}", path.display())?;
            Ok(())
        }
        Command::Report { input } => {
            let (records, sweep) = load_report(&input)?;
            print_files(out, &write_report(&input, &records, sweep.as_deref())?)
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors and usage go to `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
