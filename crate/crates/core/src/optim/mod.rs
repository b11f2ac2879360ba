//! Minimisers for smooth objectives: gradient descent, BFGS, L-BFGS and
//! regularised Newton-Raphson, all sharing one strong Wolfe line search.

mod line_search;
mod regularize;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grape::{ControlProblem, ControlSequence, Order};

pub use line_search::{line_search, strong_wolfe, LineSearchResult, LineSearchSettings, Trial};
pub use regularize::{
    rfo_initial_alpha, rfo_regularized_augmented, rfo_regularized_hessian, rfo_shift, rfo_step, trm_regularize,
    trm_trial_shift, try_cholesky, Regularized, RegularizerSettings, RfoStep, Spectrum, TrmVariant,
};

/// Objective value and derivatives at a point; `value` is minimised.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Option<Array1<f64>>,
    pub hess: Option<Array2<f64>>,
    /// Cost in trajectory units.
    pub cost: u64,
    /// Penalty part of `value`, for logging.
    pub penalty: f64,
}

pub trait Objective {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn evaluate(&self, x: &ArrayView1<'_, f64>, order: Order) -> Result<Evaluation>;

    /// Cost charged for one evaluation of the given order.
    fn cost(&self, order: Order) -> u64;
}

/// `f = −J` for a control problem.
#[derive(Debug, Clone, Copy)]
pub struct GrapeObjective<'a> {
    pub problem: &'a ControlProblem,
}

impl Objective for GrapeObjective<'_> {
    fn len(&self) -> usize {
        self.problem.num_controls()
    }

    fn evaluate(&self, x: &ArrayView1<'_, f64>, order: Order) -> Result<Evaluation> {
        let seq = ControlSequence::from_flat(self.problem.channels(), self.problem.slices(), x)?;
        let r = self.problem.evaluate(&seq, order)?;
        Ok(Evaluation {
            value: -r.j,
            grad: r.grad.map(|g| -g),
            hess: r.hess.map(|h| -h),
            cost: r.trajectory_evals,
            penalty: r.penalty,
        })
    }

    fn cost(&self, order: Order) -> u64 {
        let per_member = if order == Order::Value { 1 } else { 2 };
        per_member * self.problem.ensemble().len() as u64
    }
}

/// Closure-backed objective charging one unit per evaluation.
pub struct FnObjective<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&ArrayView1<'_, f64>, Order) -> Result<Evaluation>,
{
    fn len(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &ArrayView1<'_, f64>, order: Order) -> Result<Evaluation> {
        (self.f)(x, order)
    }

    fn cost(&self, _: Order) -> u64 {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GradDescent,
    Lbfgs,
    Bfgs,
    NewtonTrm,
    NewtonRfo,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::GradDescent, Method::Lbfgs, Method::Bfgs, Method::NewtonTrm, Method::NewtonRfo];

    pub fn name(self) -> &'static str {
        match self {
            Method::GradDescent => "grad_descent",
            Method::Lbfgs => "lbfgs",
            Method::Bfgs => "bfgs",
            Method::NewtonTrm => "newton_trm",
            Method::NewtonRfo => "newton_rfo",
        }
    }

    pub fn uses_hessian(self) -> bool {
        matches!(self, Method::NewtonTrm | Method::NewtonRfo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    pub max_iterations: usize,
    /// Stop when `‖∇f‖∞` falls below this.
    pub grad_tol: f64,
    /// Hard cap on cumulative trajectory cost.
    pub max_trajectories: Option<u64>,
    /// Stop once `−f` reaches this value.
    pub target: Option<f64>,
    pub lbfgs_memory: usize,
    pub line_search: LineSearchSettings,
    pub regularizer: RegularizerSettings,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            grad_tol: 1e-6,
            max_trajectories: None,
            target: None,
            lbfgs_memory: 20,
            line_search: LineSearchSettings::default(),
            regularizer: RegularizerSettings::default(),
        }
    }
}

/// One row of the optimisation log. Row 0 describes the starting point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// `−f`, the maximised objective.
    pub objective: f64,
    pub penalty: f64,
    pub grad_inf: f64,
    pub step_norm: f64,
    /// Shift applied to the Hessian (NaN when no Hessian is used).
    pub sigma: f64,
    pub alpha: f64,
    pub cond: f64,
    pub trajectories: u64,
    pub linesearch_evals: usize,
    /// Line-search audit: `φ(0)`, `φ'(0)`, accepted step and `φ`, `φ'` there.
    pub phi0: f64,
    pub dphi0: f64,
    pub step_length: f64,
    pub phi: f64,
    pub dphi: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OptimLog {
    pub method: Option<Method>,
    pub c1: f64,
    pub c2: f64,
    pub records: Vec<LogRecord>,
}

impl OptimLog {
    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    /// Cumulative trajectories at the first record whose objective reaches
    /// `threshold`.
    pub fn trajectories_to(&self, threshold: f64) -> Option<u64> {
        self.records.iter().find(|r| r.objective >= threshold).map(|r| r.trajectories)
    }

    /// Whether every accepted step satisfies both strong Wolfe inequalities.
    pub fn wolfe_violations(&self) -> Vec<usize> {
        self.records
            .iter()
            .skip(1)
            .filter(|r| {
                let t = Trial { alpha: r.step_length, value: r.phi, slope: r.dphi };
                !strong_wolfe(r.phi0, r.dphi0, &t, self.c1, self.c2)
            })
            .map(|r| r.iteration)
            .collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[1].objective >= w[0].objective)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    TargetReached,
    MaxIterations,
    TrajectoryBudget,
    LineSearchFailed,
    NumericalFailure,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StopReason::GradientTolerance => "gradient_tolerance",
            StopReason::TargetReached => "target_reached",
            StopReason::MaxIterations => "max_iterations",
            StopReason::TrajectoryBudget => "trajectory_budget",
            StopReason::LineSearchFailed => "line_search_failed",
            StopReason::NumericalFailure => "numerical_failure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Array1<f64>,
    pub value: f64,
    pub log: OptimLog,
    pub reason: StopReason,
    /// Trajectory cost of every evaluation made, including rejected trials.
    pub trajectories_used: u64,
    /// Error that ended the run early; `x` and `log` are still valid.
    pub failure: Option<String>,
}

fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Direction produced by one of the methods, plus log diagnostics.
struct Direction {
    d: Array1<f64>,
    sigma: f64,
    alpha: f64,
    cond: f64,
}

fn newton_direction(method: Method, h: &Array2<f64>, g: &Array1<f64>, s: &RegularizerSettings) -> Result<Direction> {
    let cap = s.cond_cap();
    let spec = Spectrum::of(&h.view())?;
    let cond = if spec.min() > 0.0 { spec.max() / spec.min() } else { f64::INFINITY };
    if cond <= cap {
        if let Some(l) = try_cholesky(&h.view())? {
            let d = -regularize::cholesky_solve(&l, &g.view());
            return Ok(Direction { d, sigma: 0.0, alpha: f64::NAN, cond });
        }
    }
    match method {
        Method::NewtonTrm => {
            let r = trm_regularize(&h.view(), s)?;
            let l = try_cholesky(&r.matrix.view())?
                .ok_or(Error::Singular("regularised Hessian is not positive definite"))?;
            let d = -regularize::cholesky_solve(&l, &g.view());
            let rs = Spectrum::of(&r.matrix.view())?;
            Ok(Direction { d, sigma: r.sigma, alpha: f64::NAN, cond: rs.max() / rs.min() })
        }
        _ => {
            let r = rfo_step(&h.view(), &g.view(), s)?;
            Ok(Direction { d: r.step, sigma: r.shift, alpha: r.alpha, cond: r.cond })
        }
    }
}

/// Minimises `objective` from `x0`.
pub fn optimize<O: Objective + ?Sized>(
    objective: &O,
    x0: Array1<f64>,
    method: Method,
    settings: &OptimSettings,
) -> Result<OptimResult> {
    settings.line_search.validate()?;
    settings.regularizer.validate()?;
    if x0.len() != objective.len() {
        return Err(Error::Dimension(format!("start has {} entries, objective {}", x0.len(), objective.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("starting point"));
    }
    let budget = settings.max_trajectories.unwrap_or(u64::MAX);
    let mut used = 0u64;
    let mut log = OptimLog { method: Some(method), c1: settings.line_search.c1, c2: settings.line_search.c2, records: vec![] };

    let first_order = if method.uses_hessian() { Order::Hessian } else { Order::Gradient };
    if objective.cost(first_order) > budget {
        return Err(Error::BudgetExhausted);
    }
    let mut x = x0;
    let mut cur = objective.evaluate(&x.view(), first_order)?;
    used += cur.cost;
    let nan = f64::NAN;
    let mut g = cur.grad.clone().ok_or(Error::InvalidArgument("objective returned no gradient".into()))?;
    log.records.push(LogRecord {
        iteration: 0,
        objective: -cur.value,
        penalty: cur.penalty,
        grad_inf: inf_norm(&g),
        step_norm: 0.0,
        sigma: nan,
        alpha: nan,
        cond: nan,
        trajectories: used,
        linesearch_evals: 0,
        phi0: nan,
        dphi0: nan,
        step_length: nan,
        phi: nan,
        dphi: nan,
    });

    // quasi-Newton state
    let mut inv_h: Option<Array2<f64>> = None;
    let mut pairs: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::new();
    let mut prev_step: Option<(f64, f64)> = None; // (step length, slope) of the previous iteration

    let stop = |log: &OptimLog, g: &Array1<f64>| -> Option<StopReason> {
        let last = log.last().unwrap();
        if inf_norm(g) < settings.grad_tol {
            Some(StopReason::GradientTolerance)
        } else if settings.target.is_some_and(|t| last.objective >= t) {
            Some(StopReason::TargetReached)
        } else {
            None
        }
    };

    let mut reason = StopReason::MaxIterations;
    let mut failure = None;
    macro_rules! bail {
        ($e:expr) => {{
            let e: Error = $e;
            log::warn!("optimisation stopped: {e}");
            failure = Some(e.to_string());
            reason = StopReason::NumericalFailure;
            break;
        }};
    }
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => bail!(e),
            }
        };
    }
    for iteration in 1..=settings.max_iterations {
        if let Some(r) = stop(&log, &g) {
            reason = r;
            break;
        }
        if method.uses_hessian() && cur.hess.is_none() {
            if used + objective.cost(Order::Hessian) > budget {
                reason = StopReason::TrajectoryBudget;
                break;
            }
            cur = attempt!(objective.evaluate(&x.view(), Order::Hessian));
            used += cur.cost;
        }

        let dir = match method {
            Method::GradDescent => Direction { d: -&g, sigma: nan, alpha: nan, cond: nan },
            Method::Bfgs => {
                let d = match &inv_h {
                    Some(h) => -h.dot(&g),
                    None => -&g,
                };
                Direction { d, sigma: nan, alpha: nan, cond: nan }
            }
            Method::Lbfgs => Direction { d: lbfgs_direction(&g, &pairs), sigma: nan, alpha: nan, cond: nan },
            Method::NewtonTrm | Method::NewtonRfo => {
                let h = attempt!(cur.hess.as_ref().ok_or(Error::InvalidArgument("objective returned no Hessian".into())));
                attempt!(newton_direction(method, h, &g, &settings.regularizer))
            }
        };
        let f0 = cur.value;
        let slope0 = g.dot(&dir.d);
        if !(slope0 < 0.0) {
            if slope0 == 0.0 && inf_norm(&g) == 0.0 {
                reason = StopReason::GradientTolerance;
                break;
            }
            bail!(Error::NotDescent(slope0));
        }

        let unit_first = method.uses_hessian() || (matches!(method, Method::Bfgs) && inv_h.is_some())
            || (matches!(method, Method::Lbfgs) && !pairs.is_empty());
        let alpha_init = if unit_first {
            1.0
        } else {
            match prev_step {
                Some((a, s)) => a * s / slope0,
                None => 1.0 / norm2(&g),
            }
        };

        // Evaluations made during the search, so the accepted one is reused.
        let mut seen: Vec<(f64, Evaluation)> = Vec::new();
        let mut first_trial = true;
        let outcome = line_search(
            |a| {
                let order = if first_trial && method.uses_hessian() && a == 1.0 { Order::Hessian } else { Order::Gradient };
                first_trial = false;
                if used + objective.cost(order) > budget {
                    return Err(Error::BudgetExhausted);
                }
                let trial_x = &x + &(&dir.d * a);
                let e = objective.evaluate(&trial_x.view(), order)?;
                used += e.cost;
                let slope = e.grad.as_ref().map_or(f64::NAN, |gg| gg.dot(&dir.d));
                let value = e.value;
                log::debug!("iteration {iteration}: trial step {a:.6e}, f {value:.12e}, slope {slope:.6e}");
                seen.push((a, e));
                Ok((value, slope))
            },
            cur.value,
            slope0,
            alpha_init,
            &settings.line_search,
        );
        let ls = match outcome {
            Ok(ls) => ls,
            Err(Error::BudgetExhausted) => {
                reason = StopReason::TrajectoryBudget;
                break;
            }
            Err(Error::NonFinite(_)) => {
                reason = StopReason::LineSearchFailed;
                break;
            }
            Err(e) => bail!(e),
        };
        if !ls.converged {
            log::warn!("line search failed at iteration {iteration} after {} evaluations", ls.evals);
            reason = StopReason::LineSearchFailed;
            break;
        }
        let step_len = ls.best.alpha;
        let next = seen
            .into_iter()
            .rev()
            .find(|(a, _)| *a == step_len)
            .map(|(_, e)| e)
            .expect("accepted trial was evaluated");
        let s = &dir.d * step_len;
        let new_g = next.grad.clone().expect("gradient evaluated");
        let y = &new_g - &g;
        let sy = s.dot(&y);

        match method {
            Method::Bfgs if sy > 0.0 => {
                let n = s.len();
                let h = inv_h.get_or_insert_with(|| Array2::eye(n) * (sy / y.dot(&y)));
                let rho = 1.0 / sy;
                let hy = h.dot(&y);
                let yhy = y.dot(&hy);
                // H ← H − ρ(s hyᵀ + hy sᵀ) + (ρ² yᵀHy + ρ) s sᵀ
                let outer = |a: &Array1<f64>, b: &Array1<f64>| {
                    a.view().insert_axis(ndarray::Axis(1)).dot(&b.view().insert_axis(ndarray::Axis(0)))
                };
                *h = &*h - &((outer(&s, &hy) + outer(&hy, &s)) * rho) + &(outer(&s, &s) * (rho * rho * yhy + rho));
            }
            Method::Lbfgs if sy > 0.0 => {
                if pairs.len() == settings.lbfgs_memory.max(1) {
                    pairs.pop_front();
                }
                pairs.push_back((s.clone(), y.clone(), 1.0 / sy));
            }
            _ => {}
        }
        prev_step = Some((step_len, slope0));

        x = &x + &s;
        g = new_g;
        cur = next;
        log.records.push(LogRecord {
            iteration,
            objective: -cur.value,
            penalty: cur.penalty,
            grad_inf: inf_norm(&g),
            step_norm: norm2(&s),
            sigma: dir.sigma,
            alpha: dir.alpha,
            cond: dir.cond,
            trajectories: used,
            linesearch_evals: ls.evals,
            phi0: f0,
            dphi0: slope0,
            step_length: step_len,
            phi: ls.best.value,
            dphi: ls.best.slope,
        });
        if iteration == settings.max_iterations {
            reason = stop(&log, &g).unwrap_or(StopReason::MaxIterations);
        }
    }
    Ok(OptimResult { value: cur.value, x, log, reason, trajectories_used: used, failure })
}

fn lbfgs_direction(g: &Array1<f64>, pairs: &VecDeque<(Array1<f64>, Array1<f64>, f64)>) -> Array1<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.scaled_add(-a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.scaled_add(a - b, s);
    }
    -q
}

/// Runs [`optimize`] on a control problem.
pub fn optimize_controls(
    problem: &ControlProblem,
    seq0: &ControlSequence,
    method: Method,
    settings: &OptimSettings,
) -> Result<(ControlSequence, OptimResult)> {
    let obj = GrapeObjective { problem };
    let result = optimize(&obj, seq0.flatten(), method, settings)?;
    let best = ControlSequence::from_flat(problem.channels(), problem.slices(), &result.x.view())?;
    Ok((best, result))
}
