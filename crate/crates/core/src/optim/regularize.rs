//! Cholesky test and Hessian regularisation: eigenvalue shifting (TRM) and
//! rational function optimisation (RFO).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrmVariant {
    /// Frobenius-norm trial shift, doubled until Cholesky succeeds.
    Iterative,
    /// `σ = max(0, δ − λ_min)` from a full eigendecomposition.
    Eigen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerSettings {
    pub trm_variant: TrmVariant,
    /// Smallest eigenvalue enforced by the eigen TRM variant.
    pub delta: f64,
    /// Damping factor applied to the RFO scaling `α`.
    pub phi: f64,
    pub alpha_max: f64,
    /// Interpolation degree `n` in the condition cap `ε^(−1/n)`.
    pub cond_power: u32,
    pub machine_eps: f64,
    /// Let `α` grow (by `1/φ`, up to `alpha_max`) while the condition cap holds.
    pub alpha_growth: bool,
    pub max_damping: usize,
}

impl Default for RegularizerSettings {
    fn default() -> Self {
        Self {
            trm_variant: TrmVariant::Eigen,
            delta: 1.0,
            phi: 0.9,
            alpha_max: 1.0,
            cond_power: 3,
            machine_eps: f64::EPSILON,
            alpha_growth: false,
            max_damping: 400,
        }
    }
}

impl RegularizerSettings {
    pub fn cond_cap(&self) -> f64 {
        self.machine_eps.powf(-1.0 / self.cond_power as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::InvalidArgument(format!("phi = {} must lie in (0, 1)", self.phi)));
        }
        if !(self.alpha_max >= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha_max = {} must be at least 1", self.alpha_max)));
        }
        if !(self.delta > 0.0) || self.cond_power == 0 || !(self.machine_eps > 0.0 && self.machine_eps < 1.0) {
            return Err(Error::InvalidArgument("delta, cond_power and machine_eps must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn to_na(a: &ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn frob(a: &ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_input(h: &ArrayView2<'_, f64>) -> Result<()> {
    if h.nrows() != h.ncols() {
        return Err(Error::Dimension(format!("Hessian is {:?}", h.dim())));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Hessian"));
    }
    let defect = frob(&(h - &h.t()).view());
    if defect > 1e-8 * frob(h) {
        return Err(Error::InvalidArgument(format!("matrix is not symmetric (defect {defect:e})")));
    }
    Ok(())
}

/// Lower Cholesky factor, or `None` when `h` is not positive definite.
pub fn try_cholesky(h: &ArrayView2<'_, f64>) -> Result<Option<Array2<f64>>> {
    check_input(h)?;
    let sym = (h + &h.t()) * 0.5;
    Ok(nalgebra::Cholesky::new(to_na(&sym.view())).map(|c| from_na(&c.l())))
}

/// Symmetric eigendecomposition, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Array1<f64>,
    /// Eigenvectors in columns.
    pub vectors: Array2<f64>,
}

impl Spectrum {
    pub fn of(h: &ArrayView2<'_, f64>) -> Result<Self> {
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix for eigendecomposition"));
        }
        let sym = (h + &h.t()) * 0.5;
        let eig = SymmetricEigen::try_new(to_na(&sym.view()), f64::EPSILON, 0)
            .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let n = h.nrows();
        let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
        Ok(Self { values, vectors })
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `Q (Λ + σ) Qᵀ`
    pub fn rebuild_shifted(&self, sigma: f64) -> Array2<f64> {
        let scaled = &self.vectors * &(&self.values + sigma).view().insert_axis(ndarray::Axis(0));
        let m = scaled.dot(&self.vectors.t());
        (&m + &m.t()) * 0.5
    }

    /// `−(H + s)⁻¹ g`
    pub fn shifted_solve(&self, shift: f64, g: &ArrayView1<'_, f64>) -> Array1<f64> {
        let coeffs = self.vectors.t().dot(g) / (&self.values + shift);
        -self.vectors.dot(&coeffs)
    }
}

/// Result of a regularisation: the positive-definite matrix and the shift.
#[derive(Debug, Clone)]
pub struct Regularized {
    pub matrix: Array2<f64>,
    pub sigma: f64,
    /// Cholesky attempts made (iterative variant).
    pub attempts: usize,
}

/// Trial shift of the iterative variant: `‖H‖_F − min diag` when the
/// smallest diagonal element is negative, otherwise `‖H‖_F`.
pub fn trm_trial_shift(h: &ArrayView2<'_, f64>) -> f64 {
    let norm = frob(h);
    let min_diag = h.diag().iter().copied().fold(f64::INFINITY, f64::min);
    if min_diag < 0.0 {
        norm - min_diag
    } else {
        norm
    }
}

/// Shifts `h` to a positive-definite matrix.
pub fn trm_regularize(h: &ArrayView2<'_, f64>, settings: &RegularizerSettings) -> Result<Regularized> {
    check_input(h)?;
    let n = h.nrows();
    match settings.trm_variant {
        TrmVariant::Iterative => {
            let mut sigma = trm_trial_shift(h).max(f64::MIN_POSITIVE);
            for attempt in 1..=200 {
                let shifted = h + &(Array2::<f64>::eye(n) * sigma);
                if try_cholesky(&shifted.view())?.is_some() {
                    return Ok(Regularized { matrix: shifted, sigma, attempts: attempt });
                }
                sigma *= 2.0;
            }
            Err(Error::Eigen("eigenvalue shift did not produce a positive-definite matrix".into()))
        }
        TrmVariant::Eigen => {
            let spec = Spectrum::of(h)?;
            let sigma = (settings.delta - spec.min()).max(0.0);
            Ok(Regularized { matrix: spec.rebuild_shifted(sigma), sigma, attempts: 0 })
        }
    }
}

/// Eigenvalue shift of the augmented Hessian `[[α²H, αg], [αgᵀ, 0]]` for a
/// fixed `α`. Returns `σ = max(0, −λ_min(aug))`; the regularised Hessian is
/// `H + (σ/α²) 1`.
pub fn rfo_shift(h: &ArrayView2<'_, f64>, g: &ArrayView1<'_, f64>, alpha: f64) -> Result<f64> {
    let n = h.nrows();
    let mut aug = Array2::zeros((n + 1, n + 1));
    aug.slice_mut(ndarray::s![..n, ..n]).assign(&(h * (alpha * alpha)));
    for i in 0..n {
        aug[[i, n]] = alpha * g[i];
        aug[[n, i]] = alpha * g[i];
    }
    Ok((-Spectrum::of(&aug.view())?.min()).max(0.0))
}

/// Initial RFO scaling: `1/√|λ_min|` when `|λ_min| > 1`, else 1, capped at
/// `alpha_max`.
pub fn rfo_initial_alpha(lambda_min: f64, settings: &RegularizerSettings) -> f64 {
    let a = if lambda_min.abs() > 1.0 { 1.0 / lambda_min.abs().sqrt() } else { 1.0 };
    a.min(settings.alpha_max)
}

#[derive(Debug, Clone)]
pub struct RfoStep {
    pub step: Array1<f64>,
    /// Shift of the augmented Hessian (0 for a pure Newton step).
    pub sigma: f64,
    pub alpha: f64,
    /// Condition number of the Hessian actually inverted.
    pub cond: f64,
    /// Diagonal shift applied to `H`, i.e. `σ/α²` plus any safeguard.
    pub shift: f64,
    pub damping_steps: usize,
    /// Whether the unregularised Newton step was taken.
    pub newton: bool,
}

fn cond_of(spec: &Spectrum, shift: f64) -> f64 {
    let (lo, hi) = (spec.min() + shift, spec.max() + shift);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Regularised Newton step by rational function optimisation.
///
/// A positive-definite Hessian with `λ_min ≥ δ` and condition below the cap
/// gives the plain Newton step. Otherwise `α` starts from
/// [`rfo_initial_alpha`] and is damped by `φ` until the regularised Hessian
/// is below the condition cap.
pub fn rfo_step(h: &ArrayView2<'_, f64>, g: &ArrayView1<'_, f64>, settings: &RegularizerSettings) -> Result<RfoStep> {
    check_input(h)?;
    settings.validate()?;
    if g.len() != h.nrows() {
        return Err(Error::Dimension(format!("gradient has {} entries, Hessian is {:?}", g.len(), h.dim())));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let spec = Spectrum::of(h)?;
    let cap = settings.cond_cap();
    if spec.min() >= settings.delta && cond_of(&spec, 0.0) <= cap {
        return Ok(RfoStep {
            step: spec.shifted_solve(0.0, g),
            sigma: 0.0,
            alpha: 1.0,
            cond: cond_of(&spec, 0.0),
            shift: 0.0,
            damping_steps: 0,
            newton: true,
        });
    }
    let mut alpha = rfo_initial_alpha(spec.min(), settings);
    let mut sigma = rfo_shift(h, g, alpha)?;
    let mut damping = 0;
    if settings.alpha_growth && cond_of(&spec, sigma / (alpha * alpha)) <= cap {
        while alpha / settings.phi <= settings.alpha_max {
            let grown = alpha / settings.phi;
            let s = rfo_shift(h, g, grown)?;
            if cond_of(&spec, s / (grown * grown)) > cap {
                break;
            }
            alpha = grown;
            sigma = s;
        }
    }
    while cond_of(&spec, sigma / (alpha * alpha)) > cap && damping < settings.max_damping {
        alpha *= settings.phi;
        sigma = rfo_shift(h, g, alpha)?;
        damping += 1;
    }
    let mut shift = sigma / (alpha * alpha);
    if cond_of(&spec, shift) > cap {
        // Only reachable for (near-)zero gradients, where the augmented
        // shift leaves H_reg singular; lift it to the condition cap.
        let (lo, hi) = (spec.min() + shift, spec.max() + shift);
        shift += if hi > 0.0 { ((hi - cap * lo) / (cap - 1.0)).max(0.0) } else { settings.delta };
        if spec.min() + shift <= 0.0 {
            shift = settings.delta - spec.min();
        }
    }
    Ok(RfoStep {
        step: spec.shifted_solve(shift, g),
        sigma,
        alpha,
        cond: cond_of(&spec, shift),
        shift,
        damping_steps: damping,
        newton: false,
    })
}

/// `H + (σ/α²) 1` as returned inside an [`RfoStep`].
pub fn rfo_regularized_hessian(h: &ArrayView2<'_, f64>, step: &RfoStep) -> Array2<f64> {
    h + &(Array2::<f64>::eye(h.nrows()) * step.shift)
}

/// `(1/α²)·Q(Λ+σ)Qᵀ` for the augmented Hessian; its top-left block is the
/// regularised Hessian.
pub fn rfo_regularized_augmented(h: &ArrayView2<'_, f64>, g: &ArrayView1<'_, f64>, alpha: f64) -> Result<Array2<f64>> {
    let n = h.nrows();
    let mut aug = Array2::zeros((n + 1, n + 1));
    aug.slice_mut(ndarray::s![..n, ..n]).assign(&(h * (alpha * alpha)));
    for i in 0..n {
        aug[[i, n]] = alpha * g[i];
        aug[[n, i]] = alpha * g[i];
    }
    let spec = Spectrum::of(&aug.view())?;
    let sigma = (-spec.min()).max(0.0);
    Ok(spec.rebuild_shifted(sigma) / (alpha * alpha))
}

pub(crate) fn cholesky_solve(l: &Array2<f64>, g: &ArrayView1<'_, f64>) -> Array1<f64> {
    let l = to_na(&l.view());
    let mut y = DVector::from_iterator(g.len(), g.iter().copied());
    l.solve_lower_triangular_mut(&mut y);
    l.tr_solve_lower_triangular_mut(&mut y);
    Array1::from_iter(y.iter().copied())
}
