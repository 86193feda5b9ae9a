//! Scenario runner for the three-level echo simulator.
//!
//! Verbs: `run` executes a config end to end and writes the artifact set,
//! `validate` checks a config without running anything, `sweep` overrides
//! the swept axis and values from the command line, `plotdata` rebuilds
//! plot CSVs from a stored record.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad config, 3 finished
//! with more than a tenth of the sweep points failed.

mod config;
mod record;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{load_config, ExperimentConfig, SweepAxis, SweepConfig};
use record::{RunRecord, FORMAT_VERSION};

#[derive(Parser)]
#[command(name = "echolock", version, about = "Photon-echo storage scenario runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Output directory (overrides the config's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override; changes the config hash.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario config and write its artifacts.
    Run { config: PathBuf },
    /// Check a config (schema, physics ranges, sweep rules) without running.
    Validate { config: PathBuf },
    /// Run a config with the sweep axis and values replaced.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated axis values, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Rebuild plot CSVs from a run record (no simulation).
    Plotdata { record: PathBuf },
}

enum AppError {
    /// Config problems: unreadable file, schema violation, bad physics.
    Config(Vec<String>),
    /// Anything that should not happen with a valid config.
    Internal(String),
}

impl AppError {
    fn report(&self) -> ExitCode {
        match self {
            AppError::Config(errors) => {
                for e in errors {
                    eprintln!("config error: {e}");
                }
                ExitCode::from(2)
            }
            AppError::Internal(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        }
    }
}

fn load_and_validate(path: &PathBuf, cli: &Cli) -> Result<ExperimentConfig, AppError> {
    let mut cfg = load_config(path).map_err(AppError::Config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = Some(out.display().to_string());
    }
    cfg.validate().map_err(AppError::Config)?;
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig, quiet: bool) -> Result<ExitCode, AppError> {
    let started = Instant::now();
    let result = scenario::run_scenario(cfg).map_err(AppError::Internal)?;
    let total = result.points.len();
    let failed = result.failed;
    let record = RunRecord {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: cfg.scenario.to_string(),
        config_hash: cfg.content_hash(),
        seed: cfg.seed,
        axis: cfg.sweep.axis.to_string(),
        wall_time_ms: started.elapsed().as_millis(),
        failed_points: failed,
        points: result.points,
        fits: result.fits,
        target: result.target,
        backward_forward_ratio: result.backward_forward_ratio,
        config: {
            // Canonical form, same as the hash input: where the artifacts
            // landed is not part of what they contain.
            let mut canonical = cfg.clone();
            canonical.output = None;
            canonical
        },
    };
    let out_dir = cfg.output.clone().unwrap_or_else(|| ".".into());
    let files =
        record::write_artifacts(&record, std::path::Path::new(&out_dir)).map_err(AppError::Internal)?;
    if !quiet {
        for f in &files {
            println!("wrote {}", f.display());
        }
        println!(
            "scenario {} finished: {} points, {} failed, {} ms",
            record.scenario, total, failed, record.wall_time_ms,
        );
        if let Some(t) = &record.target {
            println!(
                "fitted {} = {:.6e} us (configured {:.6e}, deviation {:.2}%)",
                t.name,
                t.fitted,
                t.expected,
                100.0 * t.rel_err,
            );
        }
    }
    if 10 * failed > total {
        eprintln!("{failed} of {total} sweep points failed");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: &Cli) -> Result<ExitCode, AppError> {
    if let Some(n) = cli.threads {
        // Ignore the error: the global pool can only be set once and tests
        // invoke several verbs per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.cmd {
        Cmd::Run { config } => {
            let cfg = load_and_validate(config, cli)?;
            execute(&cfg, cli.quiet)
        }
        Cmd::Validate { config } => {
            let cfg = load_and_validate(config, cli)?;
            if !cli.quiet {
                println!("ok: scenario {} (hash {})", cfg.scenario, cfg.content_hash());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep {
            config,
            axis,
            values,
        } => {
            let mut cfg = load_and_validate(config, cli)?;
            let split = (cfg.sweep.axis == *axis)
                .then_some(cfg.sweep.split)
                .flatten();
            cfg.sweep = SweepConfig {
                axis: *axis,
                values: values.clone(),
                split,
            };
            cfg.validate().map_err(AppError::Config)?;
            execute(&cfg, cli.quiet)
        }
        Cmd::Plotdata { record } => {
            let files = record::emit_plotdata(record, cli.out.as_deref())
                .map_err(AppError::Internal)?;
            if !cli.quiet {
                for f in &files {
                    println!("wrote {}", f.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => e.report(),
    }
}
