//! Benchmark configuration: JSON schema, validation, presets and problem
//! assembly.
//!
//! Frequencies are given in Hz (or ppm for chemical shifts). Control
//! variables are dimensionless multiples of the nominal power: channel `k`
//! contributes `c_k · 2π·nominal_power_hz · H_k`, so penalty bounds given in
//! Hz are divided by the nominal power on assembly.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use nrgrape::cache::{CacheConfig, ExpmCache};
use nrgrape::grape::{ControlProblem, ControlSequence};
use nrgrape::optim::{LineSearchSettings, Method, OptimSettings, RegularizerSettings, TrmVariant};
use nrgrape::penalty::{diff_matrix, per_channel, PenaltySpec};
use nrgrape::spin::{
    build_controls, build_drift, build_state, Axis, Channel, Isotope, SpinSystem, StateSpec,
};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub system: SystemBlock,
    pub control: ControlBlock,
    #[serde(default)]
    pub penalties: Vec<PenaltyBlock>,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub cache: CacheBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coupling {
    pub spins: [usize; 2],
    pub hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub isotopes: Vec<Isotope>,
    pub field_tesla: f64,
    /// Resonance offsets in Hz; mutually exclusive with `shifts_ppm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets_hz: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shifts_ppm: Option<Vec<f64>>,
    #[serde(default)]
    pub couplings: Vec<Coupling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialGuess {
    /// Uniform in `±fraction` of the nominal power.
    Random { fraction: f64 },
    Zero,
}

impl Default for InitialGuess {
    fn default() -> Self {
        InitialGuess::Random { fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBlock {
    pub channels: Vec<Channel>,
    pub slices: usize,
    pub duration_s: f64,
    pub nominal_power_hz: f64,
    #[serde(default)]
    pub initial_guess: InitialGuess,
    #[serde(default = "unit_ensemble")]
    pub ensemble: Vec<f64>,
    pub initial_state: StateSpec,
    pub target_state: StateSpec,
    /// Best attainable fidelity, used to normalise the infidelity column.
    #[serde(default = "one")]
    pub fidelity_max: f64,
}

fn unit_ensemble() -> Vec<f64> {
    vec![1.0]
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltyBlock {
    NormSquare { weight: f64 },
    DerivativeNormSquare { weight: f64, order: u8 },
    Spillout { weight: f64, upper_hz: f64, lower_hz: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerBlock {
    pub method: Method,
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub max_trajectories: Option<u64>,
    /// Stop once the objective reaches this value.
    pub target_fidelity: Option<f64>,
    pub lbfgs_memory: usize,
    pub workers: usize,
    pub line_search: LineSearchSettings,
    pub regularizer: RegularizerSettings,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        let o = OptimSettings::default();
        Self {
            method: Method::NewtonRfo,
            max_iterations: o.max_iterations,
            grad_tol: o.grad_tol,
            max_trajectories: o.max_trajectories,
            target_fidelity: o.target,
            lbfgs_memory: o.lbfgs_memory,
            workers: 1,
            line_search: o.line_search,
            regularizer: o.regularizer,
        }
    }
}

impl OptimizerBlock {
    pub fn settings(&self) -> OptimSettings {
        OptimSettings {
            max_iterations: self.max_iterations,
            grad_tol: self.grad_tol,
            max_trajectories: self.max_trajectories,
            target: self.target_fidelity,
            lbfgs_memory: self.lbfgs_memory,
            line_search: self.line_search.clone(),
            regularizer: self.regularizer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub seed: u64,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("grape-out"), seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheBlock {
    pub threshold: usize,
    pub dir: Option<PathBuf>,
    pub verify: bool,
}

impl Default for CacheBlock {
    fn default() -> Self {
        let c = CacheConfig::default();
        Self { threshold: c.threshold, dir: c.dir, verify: c.verify }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<BenchConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let config: BenchConfig = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

impl BenchConfig {
    /// Built-in benchmark problems: `hcf` and `singlet`.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "hcf" => Ok(hcf()),
            "singlet" => Ok(singlet()),
            other => Err(bad(format!("unknown preset `{other}` (expected hcf or singlet)"))),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.system;
        let n = s.isotopes.len();
        if n == 0 {
            return Err(bad("system.isotopes is empty"));
        }
        if !(s.field_tesla > 0.0 && s.field_tesla.is_finite()) {
            return Err(bad(format!("system.field_tesla = {} must be positive", s.field_tesla)));
        }
        if s.offsets_hz.is_some() && s.shifts_ppm.is_some() {
            return Err(bad("give either system.offsets_hz or system.shifts_ppm, not both"));
        }
        for (name, v) in [("offsets_hz", &s.offsets_hz), ("shifts_ppm", &s.shifts_ppm)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(bad(format!("system.{name} has {} entries for {n} spins", v.len())));
                }
            }
        }
        for c in &s.couplings {
            if c.spins[0] >= n || c.spins[1] >= n || c.spins[0] == c.spins[1] {
                return Err(bad(format!("system.couplings: bad spin pair {:?}", c.spins)));
            }
        }
        let c = &self.control;
        if c.channels.is_empty() {
            return Err(bad("control.channels is empty"));
        }
        for ch in &c.channels {
            if let Some(&bad_spin) = ch.spins.iter().find(|&&i| i >= n) {
                return Err(bad(format!("control channel `{}` names unknown spin {bad_spin}", ch.label)));
            }
            if ch.axis == Axis::Z {
                return Err(bad(format!("control channel `{}` must use axis x or y", ch.label)));
            }
        }
        if c.slices == 0 {
            return Err(bad("control.slices must be at least 1"));
        }
        if !(c.duration_s > 0.0 && c.duration_s.is_finite()) {
            return Err(bad(format!("control.duration_s = {} must be positive", c.duration_s)));
        }
        if !(c.nominal_power_hz > 0.0 && c.nominal_power_hz.is_finite()) {
            return Err(bad(format!("control.nominal_power_hz = {} must be positive", c.nominal_power_hz)));
        }
        if c.ensemble.is_empty() || c.ensemble.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(bad("control.ensemble must be a nonempty list of positive scalings"));
        }
        if !(c.fidelity_max > 0.0 && c.fidelity_max.is_finite()) {
            return Err(bad("control.fidelity_max must be positive"));
        }
        if let InitialGuess::Random { fraction } = c.initial_guess {
            if !(fraction >= 0.0 && fraction.is_finite()) {
                return Err(bad("control.initial_guess.fraction must be nonnegative"));
            }
        }
        for p in &self.penalties {
            let w = match *p {
                PenaltyBlock::NormSquare { weight } => weight,
                PenaltyBlock::DerivativeNormSquare { weight, order } => {
                    if !(order == 1 || order == 2) {
                        return Err(bad(format!("derivative penalty order {order} (expected 1 or 2)")));
                    }
                    weight
                }
                PenaltyBlock::Spillout { weight, upper_hz, lower_hz } => {
                    if !(upper_hz >= lower_hz) {
                        return Err(bad("spillout penalty needs upper_hz >= lower_hz"));
                    }
                    weight
                }
            };
            if !(w >= 0.0 && w.is_finite()) {
                return Err(bad("penalty weights must be nonnegative"));
            }
        }
        let o = &self.optimizer;
        if o.workers == 0 {
            return Err(bad("optimizer.workers must be at least 1"));
        }
        o.line_search.validate().map_err(|e| bad(format!("optimizer.line_search: {e}")))?;
        o.regularizer.validate().map_err(|e| bad(format!("optimizer.regularizer: {e}")))?;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.control.duration_s / self.control.slices as f64
    }

    /// Angular frequency of one unit of control amplitude.
    pub fn unit_rad_s(&self) -> f64 {
        2.0 * PI * self.control.nominal_power_hz
    }

    pub fn spin_system(&self) -> Result<SpinSystem, CliError> {
        let s = &self.system;
        let mut sys = SpinSystem::new(s.isotopes.clone(), s.field_tesla)?;
        if let Some(o) = &s.offsets_hz {
            sys = sys.with_offsets_hz(o)?;
        }
        if let Some(p) = &s.shifts_ppm {
            sys = sys.with_shifts_ppm(p)?;
        }
        for c in &s.couplings {
            sys = sys.with_coupling(c.spins[0], c.spins[1], c.hz)?;
        }
        Ok(sys)
    }

    pub fn penalty_specs(&self) -> Result<Vec<PenaltySpec>, CliError> {
        let k = self.control.channels.len();
        let nominal = self.control.nominal_power_hz;
        self.penalties
            .iter()
            .map(|p| {
                Ok(match *p {
                    PenaltyBlock::NormSquare { weight } => PenaltySpec::norm_square(weight),
                    PenaltyBlock::DerivativeNormSquare { weight, order } => {
                        let d = diff_matrix(self.control.slices, order, self.dt())?;
                        PenaltySpec::derivative_norm_square(weight, per_channel(&d, k))
                    }
                    PenaltyBlock::Spillout { weight, upper_hz, lower_hz } => {
                        PenaltySpec::spillout(weight, upper_hz / nominal, lower_hz / nominal)
                    }
                })
            })
            .collect()
    }

    /// Assembles the control problem with the given worker count.
    pub fn problem(&self, workers: usize) -> Result<ControlProblem, CliError> {
        let sys = self.spin_system()?;
        let unit = self.unit_rad_s();
        let controls = build_controls(&sys, &self.control.channels)?
            .into_iter()
            .map(|h| h * Complex64::new(unit, 0.0))
            .collect();
        let drift = build_drift(&sys);
        let cache = ExpmCache::new(CacheConfig {
            threshold: self.cache.threshold,
            verify: self.cache.verify,
            dir: self.cache.dir.clone(),
        });
        let problem = ControlProblem::new(
            drift,
            controls,
            build_state(&sys, &self.control.initial_state)?,
            build_state(&sys, &self.control.target_state)?,
            self.dt(),
            self.control.slices,
        )?
        .with_penalties(self.penalty_specs()?)?
        .with_ensemble(self.control.ensemble.clone())?
        .with_cache(Arc::new(cache))
        .with_workers(workers)?;
        Ok(problem)
    }

    /// Seeded initial waveform.
    pub fn initial_sequence(&self, seed: u64) -> ControlSequence {
        let (k, n) = (self.control.channels.len(), self.control.slices);
        match self.control.initial_guess {
            InitialGuess::Zero => ControlSequence::zeros(k, n),
            InitialGuess::Random { fraction } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Array2::from_shape_fn((k, n), |_| {
                    if fraction > 0.0 {
                        rng.random_range(-fraction..=fraction)
                    } else {
                        0.0
                    }
                });
                ControlSequence::new(a).expect("finite by construction")
            }
        }
    }
}

fn channel(label: &str, spin: usize, axis: Axis) -> Channel {
    Channel::new(label, vec![spin], axis)
}

/// ¹H–¹³C–¹⁹F, Lz(¹H) → Lz(¹⁹F) through the J-coupling chain.
fn hcf() -> BenchConfig {
    BenchConfig {
        system: SystemBlock {
            isotopes: vec![Isotope::H1, Isotope::C13, Isotope::F19],
            field_tesla: 9.4,
            offsets_hz: Some(vec![0.0, 0.0, 0.0]),
            shifts_ppm: None,
            couplings: vec![Coupling { spins: [0, 1], hz: 140.0 }, Coupling { spins: [1, 2], hz: -160.0 }],
        },
        control: ControlBlock {
            channels: vec![
                channel("Hx", 0, Axis::X),
                channel("Hy", 0, Axis::Y),
                channel("Cx", 1, Axis::X),
                channel("Cy", 1, Axis::Y),
                channel("Fx", 2, Axis::X),
                channel("Fy", 2, Axis::Y),
            ],
            slices: 50,
            duration_s: 0.1,
            nominal_power_hz: HCF_NOMINAL_HZ,
            initial_guess: InitialGuess::default(),
            ensemble: vec![1.0],
            initial_state: StateSpec::Lz { spins: vec![0] },
            target_state: StateSpec::Lz { spins: vec![2] },
            fidelity_max: 1.0,
        },
        penalties: vec![PenaltyBlock::Spillout { weight: 1.0, upper_hz: 10e3, lower_hz: -10e3 }],
        optimizer: preset_optimizer(),
        output: OutputBlock::default(),
        cache: CacheBlock::default(),
    }
}

pub const HCF_NOMINAL_HZ: f64 = 100.0;
pub const SINGLET_PENALTY_WEIGHT: f64 = 2e-3;

/// Optimizer settings shared by the presets. The RFO condition cap is
/// relaxed to ε^(−1/5): at ε^(−1/3) the regularised Hessian on these
/// problems is close to singular and the steps badly overshoot.
fn preset_optimizer() -> OptimizerBlock {
    let mut o = OptimizerBlock::default();
    o.regularizer.cond_power = 5;
    o.regularizer.trm_variant = TrmVariant::Iterative;
    o
}

/// Two ¹³C spins, Cz⁽¹⁾+Cz⁽²⁾ → singlet, robust to ±20% power error.
fn singlet() -> BenchConfig {
    BenchConfig {
        system: SystemBlock {
            isotopes: vec![Isotope::C13, Isotope::C13],
            field_tesla: 14.1,
            offsets_hz: None,
            shifts_ppm: Some(vec![0.0, 0.25]),
            couplings: vec![Coupling { spins: [0, 1], hz: 60.0 }],
        },
        control: ControlBlock {
            channels: vec![Channel::new("Cx", vec![0, 1], Axis::X), Channel::new("Cy", vec![0, 1], Axis::Y)],
            slices: 50,
            duration_s: 0.05,
            nominal_power_hz: 60.0,
            initial_guess: InitialGuess::default(),
            ensemble: (0..10).map(|i| 0.8 + 0.4 * i as f64 / 9.0).collect(),
            initial_state: StateSpec::Lz { spins: vec![0, 1] },
            target_state: StateSpec::Singlet { spins: vec![0, 1] },
            fidelity_max: 1.0,
        },
        penalties: vec![PenaltyBlock::NormSquare { weight: SINGLET_PENALTY_WEIGHT }],
        optimizer: preset_optimizer(),
        output: OutputBlock::default(),
        cache: CacheBlock::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["hcf", "singlet"] {
            BenchConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(BenchConfig::preset("cn2d").is_err());
    }

    #[test]
    fn preset_round_trips_through_json() {
        let c = BenchConfig::preset("singlet").unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: BenchConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(BenchConfig::preset("hcf").unwrap()).unwrap();
        v["control"]["colour"] = serde_json::json!("blue");
        assert!(serde_json::from_value::<BenchConfig>(v).is_err());
    }

    #[test]
    fn semantic_errors() {
        let mut c = BenchConfig::preset("hcf").unwrap();
        c.control.slices = 0;
        assert!(c.validate().is_err());
        let mut c = BenchConfig::preset("hcf").unwrap();
        c.control.channels[0].spins = vec![7];
        assert!(c.validate().is_err());
        let mut c = BenchConfig::preset("hcf").unwrap();
        c.system.shifts_ppm = Some(vec![0.0; 3]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn initial_guess_is_seeded_and_bounded() {
        let c = BenchConfig::preset("hcf").unwrap();
        let a = c.initial_sequence(7);
        assert_eq!(a, c.initial_sequence(7));
        assert_ne!(a, c.initial_sequence(8));
        assert!(a.amplitudes().iter().all(|x| x.abs() <= 0.05));
    }
}
