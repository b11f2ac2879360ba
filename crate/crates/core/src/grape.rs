//! State-transfer fidelity with exact first and second derivatives with
//! respect to piecewise-constant control amplitudes.
//!
//! With slice propagators `P_n = exp(-i(H₀ + Σ_k c_{k,n} H_k + iR) dt)`, the
//! objective is `J = Re⟨δ|P_N⋯P_1|ρ₀⟩ − penalties(c)`. Control variables are
//! flattened slice-major: entry `(n, k)` sits at `n·K + k` (0-based).
//!
//! Derivatives are assembled from stored forward states `ρ_n = P_n⋯P_1 ρ₀`
//! and backward costates `χ_n = (P_N⋯P_{n+1})† δ`:
//!
//! * gradient: `Re⟨χ_n|∂P_n ρ_{n−1}⟩`. The K contractions of a slice are
//!   obtained from one adjoint Fréchet derivative, since
//!   `⟨χ|L(A,E)ρ⟩ = ⟨L(A†, χρ†), E⟩_F`;
//! * same-slice Hessian blocks: `Re⟨χ_n|∂²P_n ρ_{n−1}⟩`;
//! * cross-slice blocks `n > m`: `Re⟨χ_n|∂P_n P_{n−1}⋯P_{m+1} ∂P_m|ρ_{m−1}⟩`.
//!   The lower triangle is accumulated by pushing `∂P_m ρ_{m−1}` forward, the
//!   upper triangle independently by pulling `∂P_n† χ_n` backward, and the
//!   two are averaged; their difference is reported as the asymmetry.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::cache::{cached_expm, ExpmCache};
use crate::error::{Error, Result};
use crate::linalg::{adjoint, adjoint_matvec, frobenius, inner};
use crate::penalty::{penalty_eval, PenaltySpec, PenaltyValue};
use crate::propagator::{generator_derivatives, upper_pairs};
use crate::scalar::Scalar;
use crate::spin::StateVector;

/// Control amplitudes, `K` channels × `N` slices, in the units of the
/// control operators.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    amplitudes: Array2<f64>,
}

impl ControlSequence {
    pub fn new(amplitudes: Array2<f64>) -> Result<Self> {
        if amplitudes.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("control amplitudes"));
        }
        Ok(Self { amplitudes })
    }

    pub fn zeros(channels: usize, slices: usize) -> Self {
        Self { amplitudes: Array2::zeros((channels, slices)) }
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn from_flat(channels: usize, slices: usize, flat: &ArrayView1<'_, f64>) -> Result<Self> {
        if flat.len() != channels * slices {
            return Err(Error::Dimension(format!(
                "{} values for {channels} channels × {slices} slices",
                flat.len()
            )));
        }
        let a = Array2::from_shape_fn((channels, slices), |(k, n)| flat[n * channels + k]);
        Self::new(a)
    }

    /// Slice-major flattening, `(k, n) → n·K + k`.
    pub fn flatten(&self) -> Array1<f64> {
        self.amplitudes.t().iter().copied().collect()
    }

    pub fn amplitudes(&self) -> &Array2<f64> {
        &self.amplitudes
    }

    pub fn channels(&self) -> usize {
        self.amplitudes.nrows()
    }

    pub fn slices(&self) -> usize {
        self.amplitudes.ncols()
    }
}

/// How much of the derivative tower to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

#[derive(Debug, Clone)]
pub struct FidelityReport {
    /// Objective: ensemble-mean overlap minus penalties.
    pub j: f64,
    /// Ensemble-mean overlap alone.
    pub fidelity: f64,
    pub penalty: f64,
    pub grad: Option<Array1<f64>>,
    pub hess: Option<Array2<f64>>,
    /// Relative Frobenius asymmetry of the Hessian before symmetrisation.
    pub asymmetry: Option<f64>,
    /// Full forward propagations performed, summed over ensemble members.
    pub trajectory_evals: u64,
}

/// Generators and states in one arithmetic.
#[derive(Debug, Clone)]
struct Lowered<T: Scalar> {
    /// `-i(H₀ + iR)`
    drift: Array2<T>,
    /// `-i H_k`
    controls: Vec<Array2<T>>,
    rho0: Array1<T>,
    delta: Array1<T>,
}

#[derive(Debug, Clone)]
enum Arith {
    Real(Lowered<f64>),
    Complex(Lowered<Complex64>),
}

fn lower(a: &Array2<Complex64>) -> Option<Array2<f64>> {
    a.iter().all(|z| z.im == 0.0).then(|| a.mapv(|z| z.re))
}

fn lower_vec(a: &Array1<Complex64>) -> Option<Array1<f64>> {
    a.iter().all(|z| z.im == 0.0).then(|| a.mapv(|z| z.re))
}

/// A state-transfer problem with optional penalties and a power-scaling
/// ensemble.
#[derive(Clone)]
pub struct ControlProblem {
    drift: Array2<Complex64>,
    controls: Vec<Array2<Complex64>>,
    rho0: StateVector,
    delta: StateVector,
    dt: f64,
    slices: usize,
    penalties: Vec<PenaltySpec>,
    ensemble: Vec<f64>,
    arith: Arith,
    cache: Arc<ExpmCache>,
    workers: usize,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("dimension", &self.dimension())
            .field("channels", &self.channels())
            .field("slices", &self.slices)
            .field("dt", &self.dt)
            .field("ensemble", &self.ensemble)
            .field("real_arithmetic", &self.is_real())
            .field("workers", &self.workers)
            .finish()
    }
}

impl ControlProblem {
    /// `drift` must already include `+iR` when relaxation is present.
    pub fn new(
        drift: Array2<Complex64>,
        controls: Vec<Array2<Complex64>>,
        rho0: StateVector,
        delta: StateVector,
        dt: f64,
        slices: usize,
    ) -> Result<Self> {
        let d = drift.nrows();
        if drift.ncols() != d {
            return Err(Error::Dimension(format!("drift is {:?}", drift.dim())));
        }
        if let Some(c) = controls.iter().find(|c| c.dim() != (d, d)) {
            return Err(Error::Dimension(format!("control is {:?}, drift is {d}x{d}", c.dim())));
        }
        for (name, s) in [("initial state", &rho0), ("target state", &delta)] {
            if s.coefficients().len() != d {
                return Err(Error::Dimension(format!(
                    "{name} has length {}, drift is {d}x{d}",
                    s.coefficients().len()
                )));
            }
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step {dt}")));
        }
        if slices == 0 {
            return Err(Error::InvalidArgument("at least one time slice is needed".into()));
        }
        let minus_i = Complex64::new(0.0, -1.0);
        let g0 = drift.mapv(|x| x * minus_i);
        let gk: Vec<_> = controls.iter().map(|h| h.mapv(|x| x * minus_i)).collect();
        let real = lower(&g0).and_then(|g0| {
            let gk = gk.iter().map(lower).collect::<Option<Vec<_>>>()?;
            Some(Lowered {
                drift: g0,
                controls: gk,
                rho0: lower_vec(rho0.coefficients())?,
                delta: lower_vec(delta.coefficients())?,
            })
        });
        let arith = match real {
            Some(r) => Arith::Real(r),
            None => Arith::Complex(Lowered {
                drift: g0,
                controls: gk,
                rho0: rho0.coefficients().clone(),
                delta: delta.coefficients().clone(),
            }),
        };
        Ok(Self {
            drift,
            controls,
            rho0,
            delta,
            dt,
            slices,
            penalties: Vec::new(),
            ensemble: vec![1.0],
            arith,
            cache: Arc::new(ExpmCache::default()),
            workers: 1,
            pool: None,
        })
    }

    pub fn with_penalties(mut self, penalties: Vec<PenaltySpec>) -> Result<Self> {
        for p in &penalties {
            p.validate(self.num_controls())?;
        }
        self.penalties = penalties;
        Ok(self)
    }

    /// Amplitude scalings `s_m`; member `m` sees controls `s_m · c`.
    pub fn with_ensemble(mut self, scalings: Vec<f64>) -> Result<Self> {
        if scalings.is_empty() || scalings.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("ensemble scalings must be positive and nonempty".into()));
        }
        self.ensemble = scalings;
        Ok(self)
    }

    pub fn with_cache(mut self, cache: Arc<ExpmCache>) -> Self {
        self.cache = cache;
        self
    }

    /// Number of threads for per-slice work; 1 runs everything inline.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        let workers = workers.max(1);
        self.pool = if workers == 1 {
            None
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Some(Arc::new(pool))
        };
        self.workers = workers;
        Ok(self)
    }

    pub fn dimension(&self) -> usize {
        self.drift.nrows()
    }

    pub fn channels(&self) -> usize {
        self.controls.len()
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn num_controls(&self) -> usize {
        self.channels() * self.slices
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn ensemble(&self) -> &[f64] {
        &self.ensemble
    }

    pub fn penalties(&self) -> &[PenaltySpec] {
        &self.penalties
    }

    pub fn cache(&self) -> &Arc<ExpmCache> {
        &self.cache
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn drift(&self) -> &Array2<Complex64> {
        &self.drift
    }

    pub fn controls(&self) -> &[Array2<Complex64>] {
        &self.controls
    }

    pub fn initial_state(&self) -> &StateVector {
        &self.rho0
    }

    pub fn target_state(&self) -> &StateVector {
        &self.delta
    }

    /// Whether propagation runs in real arithmetic.
    pub fn is_real(&self) -> bool {
        matches!(self.arith, Arith::Real(_))
    }

    fn check(&self, seq: &ControlSequence) -> Result<()> {
        if seq.channels() != self.channels() || seq.slices() != self.slices {
            return Err(Error::Dimension(format!(
                "sequence is {}x{}, problem has {} channels and {} slices",
                seq.channels(),
                seq.slices(),
                self.channels(),
                self.slices
            )));
        }
        if seq.amplitudes.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("control amplitudes"));
        }
        Ok(())
    }

    fn par_map<R: Send>(&self, n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }

    /// Penalty total at the nominal sequence.
    pub fn penalty(&self, seq: &ControlSequence) -> Result<PenaltyValue> {
        let flat = seq.flatten();
        let mut total = PenaltyValue::zeros(flat.len());
        for p in &self.penalties {
            total.accumulate(&penalty_eval(p, &flat.view())?);
        }
        Ok(total)
    }

    pub fn evaluate(&self, seq: &ControlSequence, order: Order) -> Result<FidelityReport> {
        self.check(seq)?;
        let nvar = self.num_controls();
        let mut fidelity = 0.0;
        let mut grad = (order >= Order::Gradient).then(|| Array1::<f64>::zeros(nvar));
        let mut hess = (order >= Order::Hessian).then(|| Array2::<f64>::zeros((nvar, nvar)));
        let mut trajectories = 0;
        for &s in &self.ensemble {
            let m = match &self.arith {
                Arith::Real(ops) => self.member(ops, seq, s, order)?,
                Arith::Complex(ops) => self.member(ops, seq, s, order)?,
            };
            fidelity += m.value;
            if let (Some(g), Some(mg)) = (grad.as_mut(), m.grad) {
                g.scaled_add(s, &mg);
            }
            if let (Some(h), Some(mh)) = (hess.as_mut(), m.hess) {
                h.scaled_add(s * s, &mh);
            }
            trajectories += m.trajectories;
        }
        let members = self.ensemble.len() as f64;
        fidelity /= members;
        grad.iter_mut().for_each(|g| *g /= members);
        hess.iter_mut().for_each(|h| *h /= members);

        let pen = self.penalty(seq)?;
        if let Some(g) = grad.as_mut() {
            *g -= &pen.grad;
        }
        let mut asymmetry = None;
        if let Some(h) = hess.as_mut() {
            *h -= &pen.hess;
            let norm = frobenius(&h.view());
            let defect = frobenius(&(&*h - &h.t()).view());
            asymmetry = Some(if norm > 0.0 { defect / norm } else { defect });
            let sym = (&*h + &h.t()) * 0.5;
            *h = sym;
        }
        let report = FidelityReport {
            j: fidelity - pen.value,
            fidelity,
            penalty: pen.value,
            grad,
            hess,
            asymmetry,
            trajectory_evals: trajectories,
        };
        if !report.j.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        Ok(report)
    }

    pub fn fidelity(&self, seq: &ControlSequence) -> Result<FidelityReport> {
        self.evaluate(seq, Order::Value)
    }

    pub fn fidelity_gradient(&self, seq: &ControlSequence) -> Result<FidelityReport> {
        self.evaluate(seq, Order::Gradient)
    }

    pub fn fidelity_hessian(&self, seq: &ControlSequence) -> Result<FidelityReport> {
        self.evaluate(seq, Order::Hessian)
    }

    /// One ensemble member, derivatives with respect to the scaled
    /// amplitudes `s·c`.
    fn member<T: Scalar>(&self, ops: &Lowered<T>, seq: &ControlSequence, s: f64, order: Order) -> Result<Member> {
        let (k_count, n_count, dt) = (self.channels(), self.slices, self.dt);
        let generator = |n: usize| {
            let mut g = ops.drift.clone();
            for (k, b) in ops.controls.iter().enumerate() {
                let c = seq.amplitudes[[k, n]] * s;
                if c != 0.0 {
                    g.scaled_add(T::from_f64(c), b);
                }
            }
            g
        };
        let props = self
            .par_map(n_count, |n| cached_expm(&self.cache, &generator(n).view(), dt))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let mut states = Vec::with_capacity(n_count + 1);
        states.push(ops.rho0.clone());
        for p in &props {
            let next = p.dot(states.last().unwrap());
            states.push(next);
        }
        let value = inner(&ops.delta.view(), &states[n_count].view()).re();
        if order == Order::Value {
            return Ok(Member { value, grad: None, hess: None, trajectories: 1 });
        }

        // costates[n] = χ_{n+1} in the 1-based notation of the module docs.
        let mut costates = vec![ops.delta.clone(); n_count];
        for n in (0..n_count - 1).rev() {
            costates[n] = adjoint_matvec(&props[n + 1].view(), &costates[n + 1].view());
        }
        let directions: Vec<Array2<T>> = ops.controls.iter().map(|b| b.mapv(|x| x * T::from_f64(dt))).collect();
        let scaled = |n: usize| generator(n).mapv(|x| x * T::from_f64(dt));

        if order == Order::Gradient {
            let rows = self.par_map(n_count, |n| -> Result<Vec<f64>> {
                let chi = &costates[n];
                let rho = &states[n];
                let w = Array2::from_shape_fn((chi.len(), rho.len()), |(a, b)| chi[a] * rho[b].conj());
                let a_adj = adjoint(&scaled(n).view());
                let (_, f, _) = generator_derivatives(&a_adj.view(), &[w], 1, &[])?;
                Ok(directions.iter().map(|e| frobenius_inner(&f[0], e)).collect())
            });
            let mut grad = Array1::zeros(k_count * n_count);
            for (n, row) in rows.into_iter().enumerate() {
                for (k, g) in row?.into_iter().enumerate() {
                    grad[n * k_count + k] = g;
                }
            }
            return Ok(Member { value, grad: Some(grad), hess: None, trajectories: 2 });
        }

        let pairs = upper_pairs(k_count);
        let slices = self
            .par_map(n_count, |n| -> Result<SliceTerms<T>> {
                let (_, dp, d2p) = generator_derivatives(&scaled(n).view(), &directions, 2, &pairs)?;
                let chi = &costates[n];
                let rho = &states[n];
                let pushed: Vec<Array1<T>> = dp.iter().map(|d| d.dot(rho)).collect();
                let pulled: Vec<Array1<T>> = dp.iter().map(|d| adjoint_matvec(&d.view(), &chi.view())).collect();
                let grad = pushed.iter().map(|v| inner(&chi.view(), &v.view()).re()).collect();
                let block = pairs
                    .iter()
                    .map(|ij| inner(&chi.view(), &d2p[ij].dot(rho).view()).re())
                    .collect();
                Ok(SliceTerms { pushed, pulled, grad, block })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let nvar = k_count * n_count;
        let mut grad = Array1::zeros(nvar);
        let mut hess = Array2::zeros((nvar, nvar));
        for (n, t) in slices.iter().enumerate() {
            for k in 0..k_count {
                grad[n * k_count + k] = t.grad[k];
            }
            for (&(i, j), &v) in pairs.iter().zip(&t.block) {
                hess[[n * k_count + i, n * k_count + j]] = v;
                hess[[n * k_count + j, n * k_count + i]] = v;
            }
        }

        // Lower triangle: push ∂P_m ρ_{m−1} forward and contract with ∂P_n† χ_n.
        let lower = self.par_map(nvar, |col| {
            let (m, k) = (col / k_count, col % k_count);
            let mut v = slices[m].pushed[k].clone();
            let mut out = Vec::with_capacity((n_count - m - 1) * k_count);
            for n in m + 1..n_count {
                for j in 0..k_count {
                    out.push(inner(&slices[n].pulled[j].view(), &v.view()).re());
                }
                if n + 1 < n_count {
                    v = props[n].dot(&v);
                }
            }
            out
        });
        // Upper triangle: pull ∂P_n† χ_n backward and contract with ∂P_m ρ_{m−1}.
        let upper = self.par_map(nvar, |row| {
            let (n, j) = (row / k_count, row % k_count);
            let mut u = slices[n].pulled[j].clone();
            let mut out = Vec::with_capacity(n * k_count);
            for m in (0..n).rev() {
                for k in 0..k_count {
                    out.push(inner(&u.view(), &slices[m].pushed[k].view()).re());
                }
                if m > 0 {
                    u = adjoint_matvec(&props[m].view(), &u.view());
                }
            }
            out
        });
        for (col, values) in lower.into_iter().enumerate() {
            let m = col / k_count;
            for (idx, v) in values.into_iter().enumerate() {
                let row = (m + 1) * k_count + idx;
                hess[[row, col]] = v;
            }
        }
        for (row, values) in upper.into_iter().enumerate() {
            let n = row / k_count;
            for (idx, v) in values.into_iter().enumerate() {
                let (m, k) = (n - 1 - idx / k_count, idx % k_count);
                hess[[m * k_count + k, row]] = v;
            }
        }
        Ok(Member { value, grad: Some(grad), hess: Some(hess), trajectories: 2 })
    }
}

struct Member {
    value: f64,
    grad: Option<Array1<f64>>,
    hess: Option<Array2<f64>>,
    trajectories: u64,
}

struct SliceTerms<T: Scalar> {
    /// `∂P/∂c_k ρ_{n−1}` per channel.
    pushed: Vec<Array1<T>>,
    /// `(∂P/∂c_k)† χ_n` per channel.
    pulled: Vec<Array1<T>>,
    grad: Vec<f64>,
    /// Same-slice second derivatives, in `upper_pairs` order.
    block: Vec<f64>,
}

/// `Re Σ conj(a)·b`
fn frobenius_inner<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x.conj() * y).re()).sum()
}

/// Final state `P_N⋯P_1 ρ₀` of the unscaled system, in complex arithmetic.
pub fn final_state(problem: &ControlProblem, seq: &ControlSequence) -> Result<Array1<Complex64>> {
    problem.check(seq)?;
    let minus_i = Complex64::new(0.0, -1.0);
    let mut rho = problem.rho0.coefficients().clone();
    for n in 0..problem.slices {
        let mut h = problem.drift.clone();
        for (k, c) in problem.controls.iter().enumerate() {
            h.scaled_add(Complex64::new(seq.amplitudes[[k, n]], 0.0), c);
        }
        let p = cached_expm(&problem.cache, &h.mapv(|x| x * minus_i).view(), problem.dt)?;
        rho = p.dot(&rho);
    }
    Ok(rho)
}
