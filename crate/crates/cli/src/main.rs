use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedrobust_cli::{load_config, run_all, RunError};
use log::LevelFilter;

/// Run a federated-learning robustness experiment described by a TOML file.
#[derive(Parser, Debug)]
#[command(name = "fedrobust", version)]
struct Args {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Write results here instead of the configured `output_path`.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(short, long)]
    seed: Option<u64>,
    /// More log output (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, conflicts_with = "verbose")]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = match (args.quiet, args.verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Warn,
        (false, 1) => LevelFilter::Info,
        (false, 2) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let base = args.config.parent().map(PathBuf::from).unwrap_or_default();
    match run_all(&config, &base, args.output_dir.as_deref()) {
        Ok(outputs) => {
            // A closed stdout (say, piped into `head`) is not a failure.
            let mut stdout = std::io::stdout().lock();
            for out in outputs {
                let _ = writeln!(stdout, "{}\t{}\t{}", out.name, out.jsonl.display(), out.csv.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, RunError::Config(_)) { 2 } else { 1 })
        }
    }
}
