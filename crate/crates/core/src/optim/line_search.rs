//! Strong Wolfe line search: bracketing followed by sectioning with
//! safeguarded cubic interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSearchSettings {
    pub c1: f64,
    pub c2: f64,
    pub max_evals: usize,
    /// Growth factor of the trial step while bracketing.
    pub extrapolation: f64,
    pub max_step: f64,
}

impl Default for LineSearchSettings {
    fn default() -> Self {
        Self { c1: 1e-4, c2: 0.9, max_evals: 30, extrapolation: 3.0, max_step: 1e10 }
    }
}

impl LineSearchSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "line search needs 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if self.max_evals == 0 || !(self.extrapolation > 1.0) || !(self.max_step > 0.0) {
            return Err(Error::InvalidArgument("line search limits must be positive".into()));
        }
        Ok(())
    }
}

/// One trial point: step length, value and directional derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub alpha: f64,
    pub value: f64,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct LineSearchResult {
    /// Accepted trial, or the lowest one seen when `converged` is false.
    pub best: Trial,
    pub evals: usize,
    pub converged: bool,
    pub trials: Vec<Trial>,
}

/// Both strong Wolfe inequalities at `t` relative to the origin `(f0, g0)`.
pub fn strong_wolfe(f0: f64, g0: f64, t: &Trial, c1: f64, c2: f64) -> bool {
    t.value <= f0 + c1 * t.alpha * g0 && t.slope.abs() <= c2 * g0.abs()
}

/// Minimiser of the cubic through `(a, fa, ga)` and `(b, fb, gb)`, kept
/// inside the middle 80% of the interval; bisection if the cubic is
/// degenerate.
fn cubic_step(a: &Trial, b: &Trial) -> f64 {
    let (lo, hi) = (a.alpha.min(b.alpha), a.alpha.max(b.alpha));
    let width = hi - lo;
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    let mid = 0.5 * (lo + hi);
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let x = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    if !x.is_finite() {
        return mid;
    }
    x.clamp(lo + 0.1 * width, hi - 0.1 * width)
}

/// Searches `φ(α) = f(x + α d)` for a strong Wolfe point.
///
/// `phi` returns `(φ(α), φ'(α))`; `f0`, `g0` are the values at `α = 0`.
/// Errors from `phi` abort the search and are returned unchanged.
pub fn line_search<F>(mut phi: F, f0: f64, g0: f64, alpha_init: f64, settings: &LineSearchSettings) -> Result<LineSearchResult>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    settings.validate()?;
    if !(g0 < 0.0) {
        return Err(Error::NotDescent(g0));
    }
    if !(alpha_init > 0.0 && alpha_init.is_finite()) {
        return Err(Error::InvalidArgument(format!("initial step {alpha_init}")));
    }
    let (c1, c2) = (settings.c1, settings.c2);
    let mut trials: Vec<Trial> = Vec::new();
    let mut eval = |alpha: f64, trials: &mut Vec<Trial>| -> Result<Trial> {
        let (value, slope) = phi(alpha)?;
        let t = Trial { alpha, value, slope };
        trials.push(t);
        Ok(t)
    };
    let armijo = |t: &Trial| t.value <= f0 + c1 * t.alpha * g0;
    let finish = |trials: Vec<Trial>, accepted: Option<Trial>| {
        let converged = accepted.is_some();
        let best = accepted.unwrap_or_else(|| {
            trials
                .iter()
                .copied()
                .filter(|t| t.value.is_finite())
                .min_by(|a, b| a.value.total_cmp(&b.value))
                .unwrap_or(Trial { alpha: 0.0, value: f0, slope: g0 })
        });
        LineSearchResult { best, evals: trials.len(), converged, trials }
    };

    let origin = Trial { alpha: 0.0, value: f0, slope: g0 };
    let mut prev = origin;
    let mut alpha = alpha_init.min(settings.max_step);
    let (mut lo, mut hi);
    loop {
        let t = eval(alpha, &mut trials)?;
        if !t.value.is_finite() || !armijo(&t) || (trials.len() > 1 && t.value >= prev.value) {
            lo = prev;
            hi = t;
            break;
        }
        if t.slope.abs() <= -c2 * g0 {
            return Ok(finish(trials, Some(t)));
        }
        if t.slope >= 0.0 {
            lo = t;
            hi = prev;
            break;
        }
        if trials.len() >= settings.max_evals || alpha >= settings.max_step {
            return Ok(finish(trials, None));
        }
        prev = t;
        alpha = (alpha * settings.extrapolation).min(settings.max_step);
    }

    while trials.len() < settings.max_evals {
        let a = if hi.value.is_finite() {
            cubic_step(&lo, &hi)
        } else {
            0.5 * (lo.alpha + hi.alpha)
        };
        let t = eval(a, &mut trials)?;
        if !t.value.is_finite() || !armijo(&t) || t.value >= lo.value {
            hi = t;
        } else {
            if t.slope.abs() <= -c2 * g0 {
                return Ok(finish(trials, Some(t)));
            }
            if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
        if (hi.alpha - lo.alpha).abs() <= f64::EPSILON * lo.alpha.abs().max(1e-300) {
            break;
        }
    }
    Ok(finish(trials, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_newton_step_is_accepted_immediately() {
        // f(x) = (x − 3)², from x = 0 along the Newton direction d = 3.
        let phi = |a: f64| Ok(((3.0 * a - 3.0).powi(2), 6.0 * (3.0 * a - 3.0)));
        let r = line_search(phi, 9.0, -18.0, 1.0, &LineSearchSettings::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.evals, 1);
        assert_eq!(r.best.alpha, 1.0);
    }

    #[test]
    fn quartic_satisfies_wolfe() {
        // f(x) = x⁴ from x = 1, d = −1.
        let phi = |a: f64| Ok(((1.0 - a).powi(4), -4.0 * (1.0 - a).powi(3)));
        let s = LineSearchSettings::default();
        for init in [0.01, 1.0, 5.0, 100.0] {
            let r = line_search(phi, 1.0, -4.0, init, &s).unwrap();
            assert!(r.converged, "init {init}");
            assert!(strong_wolfe(1.0, -4.0, &r.best, s.c1, s.c2));
        }
    }

    #[test]
    fn tight_curvature_forces_sectioning() {
        let phi = |a: f64| Ok(((1.0 - a).powi(4), -4.0 * (1.0 - a).powi(3)));
        let s = LineSearchSettings { c2: 0.1, ..Default::default() };
        let r = line_search(phi, 1.0, -4.0, 3.0, &s).unwrap();
        assert!(r.converged);
        assert!(r.evals > 1);
        assert!(strong_wolfe(1.0, -4.0, &r.best, s.c1, s.c2));
    }

    #[test]
    fn ascent_direction_is_rejected() {
        let r = line_search(|a: f64| Ok((a, 1.0)), 0.0, 1.0, 1.0, &LineSearchSettings::default());
        assert!(matches!(r, Err(Error::NotDescent(_))));
    }

    #[test]
    fn exhausted_search_reports_best_point() {
        let s = LineSearchSettings { max_evals: 2, c2: 1e-3, ..Default::default() };
        let phi = |a: f64| Ok(((1.0 - a).powi(4), -4.0 * (1.0 - a).powi(3)));
        let r = line_search(phi, 1.0, -4.0, 1e-3, &s).unwrap();
        assert!(!r.converged);
        assert!(r.best.value < 1.0);
    }

    #[test]
    fn bad_constants() {
        let s = LineSearchSettings { c1: 0.5, c2: 0.4, ..Default::default() };
        assert!(line_search(|a| Ok((a, 1.0)), 0.0, -1.0, 1.0, &s).is_err());
    }
}
