//! Benchmark harness: configuration, optimisation runs, method comparison
//! and the files they produce.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use nrgrape::grape::ControlSequence;
use nrgrape::optim::{optimize_controls, Method, OptimResult, StopReason};

pub use config::{load_config, BenchConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerical(#[from] nrgrape::Error),
    #[error("numerical failure: {0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit status: 1 for configuration problems, 2 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) | CliError::Failed(_) => 2,
            _ => 1,
        }
    }
}

/// Overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub method: Option<Method>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub workers: usize,
    pub stop_reason: StopReason,
    pub failure: Option<String>,
    pub iterations: usize,
    pub final_fidelity: f64,
    pub final_penalty: f64,
    pub final_infidelity: f64,
    pub trajectories_logged: u64,
    pub trajectories_used: u64,
    pub wall_seconds: f64,
    pub real_arithmetic: bool,
    pub liouville_dim: usize,
    pub control_variables: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best: ControlSequence,
    pub result: OptimResult,
    pub summary: RunSummary,
    pub out_dir: PathBuf,
}

/// Optimises the configured problem and writes `convergence.csv`,
/// `waveform.csv` and `summary.json` into the output directory.
pub fn run(config: &BenchConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let method = opts.method.unwrap_or(config.optimizer.method);
    let workers = opts.workers.unwrap_or(config.optimizer.workers).max(1);
    let seed = opts.seed.unwrap_or(config.output.seed);
    let out_dir = opts.out.clone().unwrap_or_else(|| config.output.dir.clone());

    let problem = config.problem(workers)?;
    let seq0 = config.initial_sequence(seed);
    let started = Instant::now();
    let (best, result) = optimize_controls(&problem, &seq0, method, &config.optimizer.settings())?;
    let wall = started.elapsed().as_secs_f64();

    std::fs::create_dir_all(&out_dir)?;
    output::write_convergence(&out_dir.join("convergence.csv"), &result.log, config.control.fidelity_max)?;
    output::write_waveform(&out_dir.join("waveform.csv"), config, &best)?;
    let last = result.log.last().expect("log has the starting row");
    let stats = problem.cache().stats();
    let summary = RunSummary {
        method,
        seed,
        workers,
        stop_reason: result.reason,
        failure: result.failure.clone(),
        iterations: last.iteration,
        final_fidelity: last.objective,
        final_penalty: last.penalty,
        final_infidelity: 1.0 - last.objective / config.control.fidelity_max,
        trajectories_logged: last.trajectories,
        trajectories_used: result.trajectories_used,
        wall_seconds: wall,
        real_arithmetic: problem.is_real(),
        liouville_dim: problem.dimension(),
        control_variables: problem.num_controls(),
        cache_hits: stats.hits,
        cache_misses: stats.misses,
    };
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    log::info!(
        "{method}: fidelity {:.6} after {} iterations, {} trajectories ({})",
        summary.final_fidelity,
        summary.iterations,
        summary.trajectories_logged,
        summary.stop_reason
    );
    if let Some(f) = &result.failure {
        return Err(CliError::Failed(format!("{f} (partial logs in {})", out_dir.display())));
    }
    Ok(RunOutcome { best, result, summary, out_dir })
}

/// One row of a method comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: Method,
    /// Cumulative trajectories at which each threshold was first reached.
    pub trajectories_to: Vec<Option<u64>>,
    pub final_fidelity: f64,
    pub trajectories: u64,
    pub stop_reason: StopReason,
}

/// Runs every method on the same problem, initial guess and line-search
/// settings. Each run is written to `<out>/<index>_<method>/`.
pub fn compare(
    config: &BenchConfig,
    methods: &[Method],
    thresholds: &[f64],
    opts: &RunOptions,
) -> Result<Vec<CompareRow>, CliError> {
    if methods.is_empty() {
        return Err(CliError::Config("no methods to compare".into()));
    }
    let base = opts.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let mut rows = Vec::with_capacity(methods.len());
    for (i, &method) in methods.iter().enumerate() {
        let run_opts = RunOptions {
            method: Some(method),
            out: Some(base.join(format!("{i}_{method}"))),
            ..opts.clone()
        };
        let outcome = run(config, &run_opts)?;
        let log = &outcome.result.log;
        rows.push(CompareRow {
            method,
            trajectories_to: thresholds.iter().map(|&t| log.trajectories_to(t)).collect(),
            final_fidelity: outcome.summary.final_fidelity,
            trajectories: outcome.summary.trajectories_logged,
            stop_reason: outcome.summary.stop_reason,
        });
    }
    output::write_comparison(&base.join("compare.csv"), thresholds, &rows)?;
    Ok(rows)
}

/// Plain-text table of a comparison.
pub fn format_comparison(thresholds: &[f64], rows: &[CompareRow]) -> String {
    let mut out = format!("{:<14}", "method");
    for t in thresholds {
        out += &format!("{:>14}", format!("traj@{t}"));
    }
    out += &format!("{:>16}{:>14}  stop\n", "final_fidelity", "trajectories");
    for r in rows {
        out += &format!("{:<14}", r.method.name());
        for t in &r.trajectories_to {
            out += &format!("{:>14}", t.map_or("-".to_string(), |v| v.to_string()));
        }
        out += &format!("{:>16.10}{:>14}  {}\n", r.final_fidelity, r.trajectories, r.stop_reason);
    }
    out
}

pub fn resolve_config(path: Option<&Path>, preset: Option<&str>) -> Result<BenchConfig, CliError> {
    match (path, preset) {
        (Some(_), Some(_)) => Err(CliError::Config("give a config file or --preset, not both".into())),
        (Some(p), None) => load_config(p),
        (None, Some(name)) => BenchConfig::preset(name),
        (None, None) => Err(CliError::Config("no config file or --preset given".into())),
    }
}
