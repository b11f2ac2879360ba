//! Quadratic penalty functionals on the flattened control vector, with
//! analytic gradients and Hessians.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// A penalty on the flattened control vector `c`.
///
/// Weights and bounds of length 1 are broadcast to every entry.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltySpec {
    /// `Σ w_k c_k²`
    NormSquare { weights: Vec<f64> },
    /// `Σ w_k [Dc]_k²`; `weights` indexes the rows of `transform`.
    DerivativeNormSquare {
        weights: Vec<f64>,
        transform: Array2<f64>,
    },
    /// `Σ w_k (c_k − u_k)² θ(c_k − u_k) + w_k (l_k − c_k)² θ(l_k − c_k)`
    Spillout { weights: Vec<f64>, upper: Vec<f64>, lower: Vec<f64> },
}

/// Value, gradient and Hessian of a penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyValue {
    pub value: f64,
    pub grad: Array1<f64>,
    pub hess: Array2<f64>,
}

impl PenaltyValue {
    pub fn zeros(n: usize) -> Self {
        Self { value: 0.0, grad: Array1::zeros(n), hess: Array2::zeros((n, n)) }
    }

    pub fn accumulate(&mut self, other: &PenaltyValue) {
        self.value += other.value;
        self.grad += &other.grad;
        self.hess += &other.hess;
    }
}

fn broadcast(name: &str, v: &[f64], n: usize) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        len if len == n => Ok(v.to_vec()),
        len => Err(Error::Dimension(format!("{name} has length {len}, expected 1 or {n}"))),
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::InvalidArgument("penalty weights must be finite and nonnegative".into()));
    }
    Ok(())
}

impl PenaltySpec {
    pub fn norm_square(weight: f64) -> Self {
        PenaltySpec::NormSquare { weights: vec![weight] }
    }

    pub fn spillout(weight: f64, upper: f64, lower: f64) -> Self {
        PenaltySpec::Spillout { weights: vec![weight], upper: vec![upper], lower: vec![lower] }
    }

    pub fn derivative_norm_square(weight: f64, transform: Array2<f64>) -> Self {
        PenaltySpec::DerivativeNormSquare { weights: vec![weight], transform }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            PenaltySpec::NormSquare { weights } => check_weights(&broadcast("weights", weights, n)?),
            PenaltySpec::DerivativeNormSquare { weights, transform } => {
                if transform.ncols() != n {
                    return Err(Error::Dimension(format!(
                        "derivative transform has {} columns, controls have {n}",
                        transform.ncols()
                    )));
                }
                check_weights(&broadcast("weights", weights, transform.nrows())?)
            }
            PenaltySpec::Spillout { weights, upper, lower } => {
                check_weights(&broadcast("weights", weights, n)?)?;
                let (u, l) = (broadcast("upper", upper, n)?, broadcast("lower", lower, n)?);
                if u.iter().zip(&l).any(|(u, l)| !(u >= l)) {
                    return Err(Error::InvalidArgument("spillout bounds need upper >= lower".into()));
                }
                Ok(())
            }
        }
    }
}

/// Evaluates a penalty at the flattened control vector `c`.
pub fn penalty_eval(spec: &PenaltySpec, c: &ArrayView1<'_, f64>) -> Result<PenaltyValue> {
    let n = c.len();
    spec.validate(n)?;
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("control amplitudes"));
    }
    let mut out = PenaltyValue::zeros(n);
    match spec {
        PenaltySpec::NormSquare { weights } => {
            let w = broadcast("weights", weights, n)?;
            for k in 0..n {
                out.value += w[k] * c[k] * c[k];
                out.grad[k] = 2.0 * w[k] * c[k];
                out.hess[[k, k]] = 2.0 * w[k];
            }
        }
        PenaltySpec::DerivativeNormSquare { weights, transform: d } => {
            let w = Array1::from(broadcast("weights", weights, d.nrows())?);
            let dc = d.dot(c);
            out.value = (&w * &dc * &dc).sum();
            out.grad = d.t().dot(&(&w * &dc)) * 2.0;
            let wd = d * &w.view().insert_axis(ndarray::Axis(1));
            out.hess = d.t().dot(&wd) * 2.0;
        }
        PenaltySpec::Spillout { weights, upper, lower } => {
            let w = broadcast("weights", weights, n)?;
            let (u, l) = (broadcast("upper", upper, n)?, broadcast("lower", lower, n)?);
            for k in 0..n {
                // The step function is taken as zero at the bound itself.
                let excess = if c[k] > u[k] {
                    c[k] - u[k]
                } else if c[k] < l[k] {
                    c[k] - l[k]
                } else {
                    continue;
                };
                out.value += w[k] * excess * excess;
                out.grad[k] = 2.0 * w[k] * excess;
                out.hess[[k, k]] = 2.0 * w[k];
            }
        }
    }
    Ok(out)
}

/// Finite-difference differentiation matrix on `n` points spaced `dt`.
///
/// Order 1 uses forward differences with a zero last row; order 2 uses the
/// three-point second difference, with the end rows copied from their
/// neighbours.
pub fn diff_matrix(n: usize, order: u8, dt: f64) -> Result<Array2<f64>> {
    if !(order == 1 || order == 2) {
        return Err(Error::InvalidArgument(format!("difference order {order}")));
    }
    if n < order as usize + 1 {
        return Err(Error::InvalidArgument(format!("{n} points are too few for order {order}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("time step {dt}")));
    }
    let mut d = Array2::zeros((n, n));
    if order == 1 {
        for i in 0..n - 1 {
            d[[i, i]] = -1.0 / dt;
            d[[i, i + 1]] = 1.0 / dt;
        }
    } else {
        let h2 = dt * dt;
        for i in 0..n {
            let centre = i.clamp(1, n - 2);
            d[[i, centre - 1]] = 1.0 / h2;
            d[[i, centre]] = -2.0 / h2;
            d[[i, centre + 1]] = 1.0 / h2;
        }
    }
    Ok(d)
}

/// Lifts a per-channel `n × n` operator to the slice-major flattened vector
/// of `k` channels.
pub fn per_channel(d: &Array2<f64>, k: usize) -> Array2<f64> {
    let (r, c) = d.dim();
    let mut out = Array2::zeros((r * k, c * k));
    for ((i, j), &x) in d.indexed_iter() {
        if x != 0.0 {
            for ch in 0..k {
                out[[i * k + ch, j * k + ch]] = x;
            }
        }
    }
    out
}
