//! Spin-1/2 systems in Liouville space.
//!
//! Operators are built in the Zeeman product basis, turned into commutation
//! superoperators `H ⊗ 1 − 1 ⊗ Hᵀ` (row-major vectorisation) and then
//! rotated into the normalised product-operator basis
//! `{1, 2Lx, 2Ly, 2Lz}/√2` per spin, spin 0 being the most significant
//! digit of the basis index. In that basis the generator `−i H_sup` of a
//! Hermitian Hamiltonian is real.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{adjoint, identity, kron};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Nuclear isotopes with tabulated magnetogyric ratios.
///
/// Values in rad s⁻¹ T⁻¹ from the IUPAC NMR nomenclature tables
/// (Harris et al., Pure Appl. Chem. 73, 1795, 2001).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Isotope {
    #[serde(rename = "1H")]
    H1,
    #[serde(rename = "13C")]
    C13,
    #[serde(rename = "19F")]
    F19,
    #[serde(rename = "14N")]
    N14,
}

impl Isotope {
    pub fn gamma(self) -> f64 {
        match self {
            Isotope::H1 => 26.752_212_8e7,
            Isotope::C13 => 6.728_284e7,
            Isotope::F19 => 25.181_48e7,
            Isotope::N14 => 1.933_779_2e7,
        }
    }

    /// `2I + 1`.
    pub fn multiplicity(self) -> usize {
        match self {
            Isotope::N14 => 3,
            _ => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Isotope::H1 => "1H",
            Isotope::C13 => "13C",
            Isotope::F19 => "19F",
            Isotope::N14 => "14N",
        }
    }
}

impl fmt::Display for Isotope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Isotope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1H" => Ok(Isotope::H1),
            "13C" => Ok(Isotope::C13),
            "19F" => Ok(Isotope::F19),
            "14N" => Ok(Isotope::N14),
            _ => Err(Error::InvalidArgument(format!("unknown isotope {s:?}"))),
        }
    }
}

/// Offset in Hz of a chemical shift given in ppm.
pub fn ppm_to_hz(isotope: Isotope, field_tesla: f64, ppm: f64) -> f64 {
    isotope.gamma() * field_tesla * ppm * 1e-6 / (2.0 * PI)
}

#[derive(Debug, Clone)]
pub struct SpinSystem {
    isotopes: Vec<Isotope>,
    field_tesla: f64,
    offsets_hz: Vec<f64>,
    couplings_hz: BTreeMap<(usize, usize), f64>,
    relaxation: Option<Array2<Complex64>>,
}

impl SpinSystem {
    pub fn new(isotopes: Vec<Isotope>, field_tesla: f64) -> Result<Self> {
        if isotopes.is_empty() {
            return Err(Error::InvalidArgument("spin system without spins".into()));
        }
        if let Some(iso) = isotopes.iter().find(|i| i.multiplicity() != 2) {
            return Err(Error::InvalidArgument(format!("{iso} is not a spin-1/2 nucleus")));
        }
        if !field_tesla.is_finite() {
            return Err(Error::NonFinite("magnet field"));
        }
        let n = isotopes.len();
        Ok(Self {
            isotopes,
            field_tesla,
            offsets_hz: vec![0.0; n],
            couplings_hz: BTreeMap::new(),
            relaxation: None,
        })
    }

    pub fn with_offsets_hz(mut self, offsets: &[f64]) -> Result<Self> {
        if offsets.len() != self.len() {
            return Err(Error::Dimension(format!("{} offsets for {} spins", offsets.len(), self.len())));
        }
        if offsets.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("offsets"));
        }
        self.offsets_hz = offsets.to_vec();
        Ok(self)
    }

    pub fn with_shifts_ppm(self, shifts: &[f64]) -> Result<Self> {
        let hz: Vec<f64> = self
            .isotopes
            .iter()
            .zip(shifts)
            .map(|(&iso, &ppm)| ppm_to_hz(iso, self.field_tesla, ppm))
            .collect();
        if shifts.len() != self.len() {
            return Err(Error::Dimension(format!("{} shifts for {} spins", shifts.len(), self.len())));
        }
        self.with_offsets_hz(&hz)
    }

    /// Adds a scalar coupling; stored once per unordered pair.
    pub fn with_coupling(mut self, a: usize, b: usize, hz: f64) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidArgument(format!("self-coupling on spin {a}")));
        }
        if a.max(b) >= self.len() {
            return Err(Error::InvalidArgument(format!("coupling ({a}, {b}) references unknown spin")));
        }
        if !hz.is_finite() {
            return Err(Error::NonFinite("coupling"));
        }
        self.couplings_hz.insert((a.min(b), a.max(b)), hz);
        Ok(self)
    }

    /// Relaxation superoperator in the product-operator basis (rad/s).
    pub fn with_relaxation(mut self, r: Array2<Complex64>) -> Result<Self> {
        let dim = self.liouville_dim();
        if r.dim() != (dim, dim) {
            return Err(Error::Dimension(format!(
                "relaxation matrix is {:?}, Liouville space has dimension {dim}",
                r.dim()
            )));
        }
        self.relaxation = Some(r);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.isotopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.isotopes.is_empty()
    }

    pub fn isotopes(&self) -> &[Isotope] {
        &self.isotopes
    }

    pub fn field_tesla(&self) -> f64 {
        self.field_tesla
    }

    pub fn offsets_hz(&self) -> &[f64] {
        &self.offsets_hz
    }

    pub fn coupling_hz(&self, a: usize, b: usize) -> f64 {
        self.couplings_hz.get(&(a.min(b), a.max(b))).copied().unwrap_or(0.0)
    }

    pub fn relaxation(&self) -> Option<&Array2<Complex64>> {
        self.relaxation.as_ref()
    }

    pub fn hilbert_dim(&self) -> usize {
        1 << self.len()
    }

    pub fn liouville_dim(&self) -> usize {
        1 << (2 * self.len())
    }

    fn check_spin(&self, spin: usize) -> Result<()> {
        if spin >= self.len() {
            return Err(Error::InvalidArgument(format!("unknown spin {spin} (system has {})", self.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Spin-1/2 matrices `(Lx, Ly, Lz)`.
pub fn single_spin_operators() -> [Array2<Complex64>; 3] {
    let h = Complex64::new(0.5, 0.0);
    let z = Complex64::new(0.0, 0.0);
    [
        Array2::from_shape_vec((2, 2), vec![z, h, h, z]).unwrap(),
        Array2::from_shape_vec((2, 2), vec![z, -I * 0.5, I * 0.5, z]).unwrap(),
        Array2::from_shape_vec((2, 2), vec![h, z, z, -h]).unwrap(),
    ]
}

/// Hilbert-space operator `L_axis` acting on `spin` of an `n`-spin system.
pub fn spin_operator(n: usize, spin: usize, axis: Axis) -> Array2<Complex64> {
    let ops = single_spin_operators();
    let op = match axis {
        Axis::X => &ops[0],
        Axis::Y => &ops[1],
        Axis::Z => &ops[2],
    };
    let id = identity::<Complex64>(2);
    let mut out = Array2::from_elem((1, 1), ONE);
    for s in 0..n {
        let factor = if s == spin { op } else { &id };
        out = kron(&out.view(), &factor.view());
    }
    out
}

/// Commutation superoperator `H ⊗ 1 − 1 ⊗ Hᵀ` in the Zeeman basis.
pub fn commutation_superoperator(h: &ArrayView2<'_, Complex64>) -> Array2<Complex64> {
    let id = identity::<Complex64>(h.nrows());
    kron(h, &id.view()) - kron(&id.view(), &h.t())
}

/// Unitary whose columns are the row-major vectorised product operators.
pub fn product_operator_basis(n: usize) -> Array2<Complex64> {
    let [lx, ly, lz] = single_spin_operators();
    let norm = Complex64::new(SQRT_2, 0.0);
    let single = [
        identity::<Complex64>(2) / norm,
        lx * Complex64::new(2.0, 0.0) / norm,
        ly * Complex64::new(2.0, 0.0) / norm,
        lz * Complex64::new(2.0, 0.0) / norm,
    ];
    let hdim = 1usize << n;
    let dim = hdim * hdim;
    let mut basis = Array2::zeros((dim, dim));
    for b in 0..dim {
        let mut op = Array2::from_elem((1, 1), ONE);
        for s in 0..n {
            let digit = (b >> (2 * (n - 1 - s))) & 3;
            op = kron(&op.view(), &single[digit].view());
        }
        for (idx, &v) in op.iter().enumerate() {
            basis[[idx, b]] = v;
        }
    }
    basis
}

/// Zeroes real or imaginary parts that are roundoff relative to the largest
/// entry, so that exactly real or imaginary matrices stay exact.
fn snap(mut m: Array2<Complex64>) -> Array2<Complex64> {
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let tol = 1e-14 * scale;
    m.mapv_inplace(|z| {
        Complex64::new(if z.re.abs() < tol { 0.0 } else { z.re }, if z.im.abs() < tol { 0.0 } else { z.im })
    });
    m
}

/// Rotates a Zeeman-basis superoperator into the product-operator basis.
fn to_product_basis(sup: &Array2<Complex64>, basis: &Array2<Complex64>) -> Array2<Complex64> {
    snap(adjoint(&basis.view()).dot(sup).dot(basis))
}

/// Liouville-space superoperator of a Hilbert-space Hamiltonian.
pub fn hamiltonian_superoperator(n: usize, h: &Array2<Complex64>) -> Array2<Complex64> {
    to_product_basis(&commutation_superoperator(&h.view()), &product_operator_basis(n))
}

fn drift_hamiltonian(system: &SpinSystem) -> Array2<Complex64> {
    let n = system.len();
    let mut h = Array2::<Complex64>::zeros((system.hilbert_dim(), system.hilbert_dim()));
    for (s, &nu) in system.offsets_hz.iter().enumerate() {
        if nu != 0.0 {
            h.scaled_add(Complex64::new(2.0 * PI * nu, 0.0), &spin_operator(n, s, Axis::Z));
        }
    }
    for (&(a, b), &j) in &system.couplings_hz {
        let coupling = Complex64::new(2.0 * PI * j, 0.0);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let term = spin_operator(n, a, axis).dot(&spin_operator(n, b, axis));
            h.scaled_add(coupling, &term);
        }
    }
    h
}

/// Drift superoperator (rad/s): offsets as `2πν Lz` and strong scalar
/// couplings `2πJ (L_a · L_b)`. Relaxation is not included.
pub fn build_drift(system: &SpinSystem) -> Array2<Complex64> {
    hamiltonian_superoperator(system.len(), &drift_hamiltonian(system))
}

/// `H₀ + iR`, the drift entering the slice generators.
pub fn drift_with_relaxation(system: &SpinSystem) -> Array2<Complex64> {
    let mut drift = build_drift(system);
    if let Some(r) = system.relaxation() {
        drift.scaled_add(I, r);
    }
    drift
}

/// One control channel: the sum of `L_axis` over a set of spins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub label: String,
    pub spins: Vec<usize>,
    pub axis: Axis,
}

impl Channel {
    pub fn new(label: impl Into<String>, spins: Vec<usize>, axis: Axis) -> Self {
        Self { label: label.into(), spins, axis }
    }
}

pub fn build_controls(system: &SpinSystem, channels: &[Channel]) -> Result<Vec<Array2<Complex64>>> {
    let n = system.len();
    let basis = product_operator_basis(n);
    channels
        .iter()
        .map(|ch| {
            if ch.axis == Axis::Z {
                return Err(Error::InvalidArgument(format!("channel {} must be an x or y control", ch.label)));
            }
            let mut h = Array2::<Complex64>::zeros((system.hilbert_dim(), system.hilbert_dim()));
            for &s in &ch.spins {
                system.check_spin(s)?;
                h = h + spin_operator(n, s, ch.axis);
            }
            Ok(to_product_basis(&commutation_superoperator(&h.view()), &basis))
        })
        .collect()
}

/// Named initial and target states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateSpec {
    /// `Σ Lz` over the listed spins.
    Lz { spins: Vec<usize> },
    /// Traceless part of the projector onto `(|↑↓⟩ − |↓↑⟩)/√2`.
    Singlet { spins: Vec<usize> },
    /// The unit operator.
    Unit,
}

/// Normalised Liouville-space state vector in the product-operator basis.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Array1<Complex64>);

impl StateVector {
    /// Normalises `coefficients`.
    pub fn new(coefficients: Array1<Complex64>) -> Result<Self> {
        let norm = coefficients.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidArgument("state vector has zero or non-finite norm".into()));
        }
        Ok(Self(coefficients.mapv(|z| z / norm)))
    }

    pub fn coefficients(&self) -> &Array1<Complex64> {
        &self.0
    }

    pub fn inner(&self, other: &StateVector) -> Complex64 {
        crate::linalg::inner(&self.0.view(), &other.0.view())
    }
}

/// Product-operator coefficients of a Hilbert-space operator.
pub fn operator_to_state(n: usize, op: &Array2<Complex64>) -> Result<StateVector> {
    let basis = product_operator_basis(n);
    let vec = Array1::from_iter(op.iter().copied());
    let coeffs = adjoint(&basis.view()).dot(&vec);
    let scale = coeffs.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let tol = 1e-14 * scale;
    let cleaned = coeffs.mapv(|z| {
        Complex64::new(if z.re.abs() < tol { 0.0 } else { z.re }, if z.im.abs() < tol { 0.0 } else { z.im })
    });
    StateVector::new(cleaned)
}

pub fn build_state(system: &SpinSystem, spec: &StateSpec) -> Result<StateVector> {
    let n = system.len();
    let dim = system.hilbert_dim();
    let op = match spec {
        StateSpec::Lz { spins } => {
            if spins.is_empty() {
                return Err(Error::InvalidArgument("Lz state over an empty spin set".into()));
            }
            let mut op = Array2::<Complex64>::zeros((dim, dim));
            for &s in spins {
                system.check_spin(s)?;
                op = op + spin_operator(n, s, Axis::Z);
            }
            op
        }
        StateSpec::Singlet { spins } => {
            if spins.len() != 2 || spins[0] == spins[1] {
                return Err(Error::InvalidArgument(format!(
                    "singlet needs two distinct spins, got {spins:?}"
                )));
            }
            system.check_spin(spins[0])?;
            system.check_spin(spins[1])?;
            // |S><S| = 1/4 − L_a·L_b, whose traceless part is −L_a·L_b.
            let mut op = Array2::<Complex64>::zeros((dim, dim));
            for axis in [Axis::X, Axis::Y, Axis::Z] {
                op = op - spin_operator(n, spins[0], axis).dot(&spin_operator(n, spins[1], axis));
            }
            op
        }
        StateSpec::Unit => identity::<Complex64>(dim),
    };
    operator_to_state(n, &op)
}
