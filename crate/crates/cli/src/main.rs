use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use fedsoft::config::{ExperimentConfig, SWEEPABLE};
use fedsoft::fedloop::run_with_sink;
use fedsoft::metrics::{CsvWriter, RunSummary};

#[derive(Parser)]
#[command(name = "fedsoft", version, about = "Wireless federated LoRA simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; writes rounds.csv and summary.json.
    Run {
        /// Experiment config (TOML, or JSON with a .json extension).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the worker-thread count (0 = all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run one experiment per value of a config field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted field path, e.g. task.shards or control.sparsifier.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        ExperimentConfig::from_json_str(&text)
    } else {
        ExperimentConfig::from_toml_str(&text)
    };
    parsed.map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    status: &'static str,
    error: Option<String>,
    rounds_completed: usize,
    summary: Option<&'a RunSummary>,
    config: &'a ExperimentConfig,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Runs one experiment into `out`, always leaving a CSV and a summary.
fn run_one(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let csv_path = out.join("rounds.csv");
    let file = File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let mut csv = CsvWriter::new(BufWriter::new(file)).map_err(|e| io_err(&csv_path, e))?;
    let mut write_error = None;
    let mut completed = 0usize;
    let result = run_with_sink(cfg, |rec| {
        completed += 1;
        if write_error.is_none() {
            write_error = csv.write(rec).err();
        }
    });
    csv.flush().map_err(|e| io_err(&csv_path, e))?;
    if let Some(e) = write_error {
        return Err(io_err(&csv_path, e));
    }
    let summary_path = out.join("summary.json");
    match result {
        Ok(summary) => {
            write_json(
                &summary_path,
                &SummaryFile {
                    status: "ok",
                    error: None,
                    rounds_completed: completed,
                    summary: Some(&summary),
                    config: cfg,
                },
            )?;
            Ok(summary)
        }
        Err(e) => {
            write_json(
                &summary_path,
                &SummaryFile {
                    status: "failed",
                    error: Some(e.to_string()),
                    rounds_completed: completed,
                    summary: None,
                    config: cfg,
                },
            )?;
            Err(CliError::Runtime(format!("run failed after {completed} rounds: {e}")))
        }
    }
}

fn dir_name(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn sweep(base: &ExperimentConfig, axis: &str, values: &[String], out: &Path) -> Result<(), CliError> {
    if !SWEEPABLE.contains(&axis) {
        return Err(CliError::Config(format!(
            "`{axis}` is not sweepable; sweepable fields: {}",
            SWEEPABLE.join(", ")
        )));
    }
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config("--values must list at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| base.with_override(axis, v).map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let results: Vec<Result<RunSummary, CliError>> = configs
        .par_iter()
        .zip(&values)
        .map(|(cfg, v)| run_one(cfg, &out.join(format!("{}={}", dir_name(axis), dir_name(v)))))
        .collect();

    let path = out.join("sweep_summary.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
    let mut lines = vec!["value,status,rank,final_loss,min_loss,mean_cov_norm,mean_ratio,mean_delay,final_queue".to_string()];
    for (v, r) in values.iter().zip(&results) {
        lines.push(match r {
            Ok(s) => format!(
                "{v},ok,{},{},{},{},{},{},{}",
                s.rank, s.final_loss, s.min_loss, s.mean_cov_norm, s.mean_ratio, s.mean_delay, s.final_queue
            ),
            Err(_) => format!("{v},failed,,,,,,,"),
        });
    }
    for line in lines {
        writeln!(w, "{line}").map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    match results.into_iter().find_map(Result::err) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            run_one(&cfg, &out).map(|_| ())
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => sweep(&load_config(&config)?, &axis, &values, &out),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
