use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nrgrape::optim::Method;
use nrgrape_cli::{compare, format_comparison, resolve_config, run, BenchConfig, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "grape", version, about = "Newton-Raphson GRAPE benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise one problem and write convergence, waveform and summary files.
    Run {
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["hcf", "singlet"])]
        preset: Option<String>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several methods on the same problem and tabulate trajectory counts.
    Compare {
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["hcf", "singlet"])]
        preset: Option<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.99")]
        thresholds: Vec<f64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a built-in configuration as JSON.
    Preset {
        #[arg(value_parser = ["hcf", "singlet"])]
        name: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, preset, method, workers, seed, out } => {
            let cfg = resolve_config(config.as_deref(), preset.as_deref())?;
            let outcome = run(&cfg, &RunOptions { method, workers, seed, out })?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::Compare { config, preset, methods, thresholds, workers, seed, out } => {
            let cfg = resolve_config(config.as_deref(), preset.as_deref())?;
            let rows = compare(&cfg, &methods, &thresholds, &RunOptions { method: None, workers, seed, out })?;
            print!("{}", format_comparison(&thresholds, &rows));
        }
        Command::Preset { name } => {
            println!("{}", serde_json::to_string_pretty(&BenchConfig::preset(&name)?)?);
        }
    }
    Ok(())
}
