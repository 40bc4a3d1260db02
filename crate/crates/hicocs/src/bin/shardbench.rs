//! Experiment driver: single runs, axis sweeps, and the built-in
//! verification suite.
//!
//! Exit codes: 0 on success, 2 on an invalid configuration, 3 when the
//! verification suite reports a failing criterion.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hicocs::acceptance;
use hicocs::harness::{
    csv_string, export_csv, export_json, json_string, run_experiment, run_sweep,
    ExperimentConfig, HarnessError, MetricsReport, Scheme, SweepAxis,
};

#[derive(Parser)]
#[command(
    name = "shardbench",
    about = "Cross-shard transfer benchmarks over a simulated sharded ledger",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a config file.
    Run {
        /// TOML file whose keys mirror the experiment config fields.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured scheme.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        /// Override the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory to write results into instead of printing them.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run one experiment per axis value for each selected scheme.
    Sweep {
        /// TOML base config; omitted fields fall back to defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated schemes; defaults to all four.
        #[arg(long, value_delimiter = ',', value_parser = parse_scheme)]
        scheme: Vec<Scheme>,
        /// Override the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory to write results into instead of printing them.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run the verification suite and print one line per criterion.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Skewness,
    BlockSize,
    TxCount,
}

impl From<Axis> for SweepAxis {
    fn from(axis: Axis) -> SweepAxis {
        match axis {
            Axis::Skewness => SweepAxis::Skewness,
            Axis::BlockSize => SweepAxis::BlockSize,
            Axis::TxCount => SweepAxis::TxCount,
        }
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "hicocs" => Ok(Scheme::Hicocs),
        "vanilla" => Ok(Scheme::Vanilla),
        "twopl" => Ok(Scheme::Twopl),
        "occ" => Ok(Scheme::Occ),
        other => Err(format!("unknown scheme `{other}` (hicocs, vanilla, twopl, occ)")),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                HarnessError::ConfigInvalid(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, HarnessError> {
    match command {
        Command::Run { config, scheme, seed, out, format } => {
            let mut cfg = ExperimentConfig::from_toml_path(&config)?;
            if let Some(scheme) = scheme {
                cfg.scheme = scheme;
            }
            if let Some(seed) = seed {
                cfg.rng_seed = seed;
            }
            let reports = vec![run_experiment(&cfg)?];
            emit(&reports, out.as_deref(), format)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, axis, values, scheme, seed, out, format } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::from_toml_path(&path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.rng_seed = seed;
            }
            let schemes: &[Scheme] = if scheme.is_empty() { &Scheme::ALL } else { &scheme };
            let reports = run_sweep(&cfg, axis.into(), &values, schemes)?;
            emit(&reports, out.as_deref(), format)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let outcomes = acceptance::run_all();
            for outcome in &outcomes {
                println!("{outcome}");
            }
            if outcomes.iter().all(|o| o.passed) {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}

/// Print to stdout, or write `results.csv` / `results.json` under `out`.
fn emit(
    reports: &[MetricsReport],
    out: Option<&std::path::Path>,
    format: Format,
) -> Result<(), HarnessError> {
    match (out, format) {
        (None, Format::Csv) => print!("{}", csv_string(reports)),
        (None, Format::Json) => println!("{}", json_string(reports)?),
        (Some(dir), format) => {
            std::fs::create_dir_all(dir).map_err(|e| {
                HarnessError::ConfigInvalid(format!("cannot create out dir {}: {e}", dir.display()))
            })?;
            let path = dir.join(match format {
                Format::Csv => "results.csv",
                Format::Json => "results.json",
            });
            match format {
                Format::Csv => export_csv(reports, &path)?,
                Format::Json => export_json(reports, &path)?,
            }
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}
