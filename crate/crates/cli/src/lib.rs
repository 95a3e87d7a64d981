//! `fusenet`: train, evaluate and ablate the fusion detector from the command line.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fusenet_core::harness::BENCH_CSV_HEADER;
use fusenet_core::train::{ABLATION_CSV_HEADER, EVAL_CSV_HEADER, LOG_HEADER};

use crate::commands::{ABLATION_RUNS_HEADER, GRADCHECK_HEADER};
use crate::config::{known_keys, parse_override, RunConfig};
pub use crate::error::{CliError, CliResult, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "FUSENET_THREADS";

fn after_help() -> String {
    let mut s = String::from("CSV outputs (header row is fixed):\n");
    for (file, header) in [
        ("train_log.csv", LOG_HEADER),
        ("eval.csv", EVAL_CSV_HEADER),
        ("ablation.csv", ABLATION_CSV_HEADER),
        ("ablation_runs.csv", ABLATION_RUNS_HEADER),
        ("gradcheck.csv", GRADCHECK_HEADER),
        ("bench.csv", BENCH_CSV_HEADER),
    ] {
        s.push_str(&format!("  {file:<18} {header}\n"));
    }
    s.push_str("\nConfig keys (file sections or --set section.key=value):\n");
    let keys = known_keys();
    let w = keys.keys().map(|k| k.len()).max().unwrap_or(0);
    for (k, v) in keys {
        s.push_str(&format!("  {k:<w$}  {v}\n"));
    }
    s.push_str(&format!(
        "\nExit codes: 0 success, 1 usage/validation error, 2 numerical failure (NaN loss, failed gradient check).\n\
         {THREADS_ENV}=N caps the number of worker threads."
    ));
    s
}

#[derive(Debug, Parser)]
#[command(
    name = "fusenet",
    version,
    about = "Multi-scale attention fusion detector: training, evaluation and ablation harness"
)]
#[command(after_help = after_help())]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Config file (TOML subset: key = value, [section] headers).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long = "image-size", global = true, value_name = "N")]
    pub image_size: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override one config key (repeatable); wins over the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes train_log.csv, last.ckpt, best.ckpt and run.toml.
    Train,
    /// Evaluate a checkpoint; writes eval.csv and prints a table.
    Eval {
        checkpoint: PathBuf,
        /// Dataset directory (PPM + annotation files); the synthetic validation split when omitted.
        data: Option<PathBuf>,
    },
    /// Train every ablation setting for every seed; writes ablation.csv, ablation_runs.csv, ablation.md.
    Ablate,
    /// Finite-difference check of every block; writes gradcheck.csv.
    Gradcheck,
    /// Parameter/FLOP counts and forward latency per setting; writes bench.csv.
    Bench,
    /// Draw predicted boxes on a PPM image; writes <stem>_overlay.ppm and <stem>_overlay.txt.
    Render { checkpoint: PathBuf, image: PathBuf },
    /// Write the synthetic train and val splits as PPM + annotation files.
    GenData,
}

impl CommonArgs {
    /// Config file, then `--set`, then the dedicated flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<CliResult<Vec<_>>>()?;
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), toml::Value::Integer(s as i64)));
        }
        if let Some(n) = self.image_size {
            overrides.push(("image_size".into(), toml::Value::Integer(n as i64)));
        }
        if let Some(n) = self.epochs {
            overrides.push(("train.epochs".into(), toml::Value::Integer(n as i64)));
        }
        if let Some(p) = &self.out {
            overrides.push(("out".into(), toml::Value::String(p.display().to_string())));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn init_threads_from_env() -> CliResult<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        fusenet_core::par::init_threads(n);
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    init_threads_from_env()?;
    let cfg = cli.common.resolve()?;
    match &cli.command {
        Command::Train => commands::train(&cfg),
        Command::Eval { checkpoint, data } => commands::eval(&cfg, checkpoint, data.as_deref()),
        Command::Ablate => commands::ablate(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Bench => commands::bench(&cfg),
        Command::Render { checkpoint, image } => commands::render(&cfg, checkpoint, image),
        Command::GenData => commands::gen_data(&cfg),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
