//! CSV writers. Floating-point values carry 17 significant digits.

use std::path::Path;

use nrgrape::grape::ControlSequence;
use nrgrape::optim::OptimLog;

use crate::{BenchConfig, CliError, CompareRow};

pub const CONVERGENCE_COLUMNS: [&str; 10] = [
    "iteration",
    "cumulative_trajectories",
    "fidelity",
    "penalty",
    "infidelity",
    "grad_inf_norm",
    "sigma",
    "alpha",
    "cond_estimate",
    "linesearch_evals",
];

pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub fn write_convergence(path: &Path, log: &OptimLog, fidelity_max: f64) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CONVERGENCE_COLUMNS)?;
    for r in &log.records {
        w.write_record([
            r.iteration.to_string(),
            r.trajectories.to_string(),
            fmt_f64(r.objective),
            fmt_f64(r.penalty),
            fmt_f64(1.0 - r.objective / fidelity_max),
            fmt_f64(r.grad_inf),
            fmt_f64(r.sigma),
            fmt_f64(r.alpha),
            fmt_f64(r.cond),
            r.linesearch_evals.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per slice, one column per channel, amplitudes in rad/s, after a
/// comment line giving the slice duration.
pub fn write_waveform(path: &Path, config: &BenchConfig, seq: &ControlSequence) -> Result<(), CliError> {
    let mut file = std::fs::File::create(path)?;
    use std::io::Write;
    writeln!(file, "# dt_s={} units=rad_per_s", fmt_f64(config.dt()))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(config.control.channels.iter().map(|c| c.label.as_str()))?;
    let unit = config.unit_rad_s();
    for col in seq.amplitudes().columns() {
        w.write_record(col.iter().map(|&a| fmt_f64(a * unit)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_comparison(path: &Path, thresholds: &[f64], rows: &[CompareRow]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(thresholds.iter().map(|t| format!("trajectories_to_{t}")));
    header.extend(["final_fidelity", "trajectories", "stop_reason"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.method.name().to_string()];
        rec.extend(r.trajectories_to.iter().map(|t| t.map_or(String::new(), |v| v.to_string())));
        rec.push(fmt_f64(r.final_fidelity));
        rec.push(r.trajectories.to_string());
        rec.push(r.stop_reason.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
