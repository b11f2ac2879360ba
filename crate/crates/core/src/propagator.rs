//! Matrix exponentials and their directional derivatives.
//!
//! Derivatives come from the auxiliary (block upper-triangular) matrix
//! method: with `G` the slice generator and `E_i` a direction,
//!
//! ```text
//! exp [ G  E_i  0  ]   [ P  D_i  A_ij ]
//!     [ 0  G   E_j ] = [ 0  P    D_j  ]
//!     [ 0  0    G  ]   [ 0  0    P    ]
//! ```
//!
//! where `D_i = ∂P/∂c_i` and `∂²P/∂c_i∂c_j = A_ij + A_ji`. The block algebra
//! is closed under products and solves, so the Padé scaling-and-squaring
//! recurrence is carried out directly on the blocks: the diagonal block is
//! shared by every direction, each superdiagonal block by every pair it
//! appears in, and the two orderings of a corner are accumulated as one sum.
//! The dense augmented matrices are still available in
//! [`first_derivative_dense`] and [`second_derivative_dense`].

use std::cell::Cell;
use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm1, Lu};
use crate::scalar::Scalar;

thread_local! {
    static EXPM_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of dense [`expm`] evaluations performed on the current thread.
pub fn expm_call_count() -> u64 {
    EXPM_CALLS.with(Cell::get)
}

// Higham (2005) backward-error thresholds for the [m/m] Padé approximants.
const PADE_THETA: [(usize, f64); 4] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068),
];
const THETA_13: f64 = 5.371_920_351_148_152;

fn pade_coefficients(m: usize) -> &'static [f64] {
    match m {
        3 => &[120.0, 60.0, 12.0, 1.0],
        5 => &[30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0],
        7 => &[17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0],
        9 => &[
            17643225600.0,
            8821612800.0,
            2075673600.0,
            302702400.0,
            30270240.0,
            2162160.0,
            110880.0,
            3960.0,
            90.0,
            1.0,
        ],
        13 => &[
            64764752532480000.0,
            32382376266240000.0,
            7771770303897600.0,
            1187353796428800.0,
            129060195264000.0,
            10559470521600.0,
            670442572800.0,
            33522128640.0,
            1323241920.0,
            40840800.0,
            960960.0,
            16380.0,
            182.0,
            1.0,
        ],
        _ => unreachable!("no Padé table for degree {m}"),
    }
}

/// Operations the Padé recurrence needs from the thing being exponentiated.
trait PadeAlgebra: Sized {
    fn norm_bound(&self) -> f64;
    fn scale(&mut self, f: f64);
    fn mul(&self, rhs: &Self) -> Self;
    /// `Σ cᵢ Xᵢ + id·I`; `terms` must be nonempty.
    fn lincomb(terms: &[(f64, &Self)], id: f64) -> Self;
    /// `Q⁻¹ P`.
    fn solve(q: &Self, p: &Self) -> Result<Self>;
}

fn pade_exponential<A: PadeAlgebra>(mut a: A) -> Result<A> {
    let norm = a.norm_bound();
    if let Some(&(m, _)) = PADE_THETA.iter().find(|(_, theta)| norm <= *theta) {
        return pade_low(&a, m);
    }
    let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
    a.scale(0.5f64.powi(s));
    let mut r = pade_13(&a)?;
    for _ in 0..s {
        r = r.mul(&r);
    }
    Ok(r)
}

fn pade_low<A: PadeAlgebra>(a: &A, m: usize) -> Result<A> {
    let b = pade_coefficients(m);
    let mut powers = vec![a.mul(a)];
    while 2 * (powers.len() + 1) < m {
        let next = powers.last().unwrap().mul(&powers[0]);
        powers.push(next);
    }
    // powers[i] = A^(2i+2)
    let odd: Vec<(f64, &A)> = powers.iter().enumerate().map(|(i, p)| (b[2 * i + 3], p)).collect();
    let even: Vec<(f64, &A)> = powers.iter().enumerate().map(|(i, p)| (b[2 * i + 2], p)).collect();
    let u = a.mul(&A::lincomb(&odd, b[1]));
    let v = A::lincomb(&even, b[0]);
    finish_pade(&u, &v)
}

fn pade_13<A: PadeAlgebra>(a: &A) -> Result<A> {
    let b = pade_coefficients(13);
    let a2 = a.mul(a);
    let a4 = a2.mul(&a2);
    let a6 = a4.mul(&a2);
    let inner_u = A::lincomb(&[(b[13], &a6), (b[11], &a4), (b[9], &a2)], 0.0);
    let tail_u = A::lincomb(&[(b[7], &a6), (b[5], &a4), (b[3], &a2)], b[1]);
    let u = a.mul(&A::lincomb(&[(1.0, &a6.mul(&inner_u)), (1.0, &tail_u)], 0.0));
    let inner_v = A::lincomb(&[(b[12], &a6), (b[10], &a4), (b[8], &a2)], 0.0);
    let tail_v = A::lincomb(&[(b[6], &a6), (b[4], &a4), (b[2], &a2)], b[0]);
    let v = A::lincomb(&[(1.0, &a6.mul(&inner_v)), (1.0, &tail_v)], 0.0);
    finish_pade(&u, &v)
}

fn finish_pade<A: PadeAlgebra>(u: &A, v: &A) -> Result<A> {
    let p = A::lincomb(&[(1.0, v), (1.0, u)], 0.0);
    let q = A::lincomb(&[(1.0, v), (-1.0, u)], 0.0);
    A::solve(&q, &p)
}

fn combine<T: Scalar>(terms: &[(f64, &Array2<T>)]) -> Array2<T> {
    let (c0, x0) = terms[0];
    let mut out = x0.mapv(|x| x * T::from_f64(c0));
    for &(c, x) in &terms[1..] {
        out.scaled_add(T::from_f64(c), x);
    }
    out
}

fn add_identity<T: Scalar>(a: &mut Array2<T>, id: f64) {
    if id != 0.0 {
        let id = T::from_f64(id);
        a.diag_mut().mapv_inplace(|x| x + id);
    }
}

struct Dense<T: Scalar>(Array2<T>);

impl<T: Scalar> PadeAlgebra for Dense<T> {
    fn norm_bound(&self) -> f64 {
        norm1(&self.0.view())
    }
    fn scale(&mut self, f: f64) {
        let f = T::from_f64(f);
        self.0.mapv_inplace(|x| x * f);
    }
    fn mul(&self, rhs: &Self) -> Self {
        Dense(self.0.dot(&rhs.0))
    }
    fn lincomb(terms: &[(f64, &Self)], id: f64) -> Self {
        let mats: Vec<(f64, &Array2<T>)> = terms.iter().map(|&(c, x)| (c, &x.0)).collect();
        let mut out = combine(&mats);
        add_identity(&mut out, id);
        Dense(out)
    }
    fn solve(q: &Self, p: &Self) -> Result<Self> {
        Ok(Dense(Lu::factor(&q.0.view())?.solve(&p.0.view())))
    }
}

/// Block upper-triangular element of the auxiliary-matrix algebra.
///
/// `first[k]` is the superdiagonal block belonging to direction `k`;
/// `second[p]` holds `A_ij + A_ji` for `pairs[p] = (i, j)`.
struct Blocks<'a, T: Scalar> {
    diag: Array2<T>,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
    pairs: &'a [(usize, usize)],
}

impl<T: Scalar> Blocks<'_, T> {
    fn gemm(alpha: f64, a: &Array2<T>, b: &Array2<T>, c: &mut Array2<T>) {
        general_mat_mul(T::from_f64(alpha), a, b, T::one(), c);
    }
}

impl<T: Scalar> PadeAlgebra for Blocks<'_, T> {
    fn norm_bound(&self) -> f64 {
        // Every block column of the 2x2 and 3x3 forms holds the diagonal
        // block plus at most one direction block.
        let widest = self.first.iter().map(|f| norm1(&f.view())).fold(0.0, f64::max);
        norm1(&self.diag.view()) + widest
    }

    fn scale(&mut self, f: f64) {
        let f = T::from_f64(f);
        self.diag.mapv_inplace(|x| x * f);
        for m in self.first.iter_mut().chain(self.second.iter_mut()) {
            m.mapv_inplace(|x| x * f);
        }
    }

    fn mul(&self, rhs: &Self) -> Self {
        let diag = self.diag.dot(&rhs.diag);
        let first = self
            .first
            .iter()
            .zip(&rhs.first)
            .map(|(l, r)| {
                let mut out = self.diag.dot(r);
                Self::gemm(1.0, l, &rhs.diag, &mut out);
                out
            })
            .collect();
        let second = self
            .pairs
            .iter()
            .enumerate()
            .map(|(p, &(i, j))| {
                let mut out = self.diag.dot(&rhs.second[p]);
                Self::gemm(1.0, &self.second[p], &rhs.diag, &mut out);
                if i == j {
                    Self::gemm(2.0, &self.first[i], &rhs.first[i], &mut out);
                } else {
                    Self::gemm(1.0, &self.first[i], &rhs.first[j], &mut out);
                    Self::gemm(1.0, &self.first[j], &rhs.first[i], &mut out);
                }
                out
            })
            .collect();
        Blocks { diag, first, second, pairs: self.pairs }
    }

    fn lincomb(terms: &[(f64, &Self)], id: f64) -> Self {
        let pick = |f: &dyn Fn(&Self) -> &Array2<T>| -> Array2<T> {
            let mats: Vec<(f64, &Array2<T>)> = terms.iter().map(|&(c, x)| (c, f(x))).collect();
            combine(&mats)
        };
        let mut diag = pick(&|x| &x.diag);
        add_identity(&mut diag, id);
        let lead = terms[0].1;
        let first = (0..lead.first.len()).map(|k| pick(&|x| &x.first[k])).collect();
        let second = (0..lead.second.len()).map(|p| pick(&|x| &x.second[p])).collect();
        Blocks { diag, first, second, pairs: lead.pairs }
    }

    fn solve(q: &Self, p: &Self) -> Result<Self> {
        let lu = Lu::factor(&q.diag.view())?;
        let diag = lu.solve(&p.diag.view());
        let first: Vec<Array2<T>> = q
            .first
            .iter()
            .zip(&p.first)
            .map(|(qk, pk)| {
                let mut rhs = pk.clone();
                Self::gemm(-1.0, qk, &diag, &mut rhs);
                lu.solve(&rhs.view())
            })
            .collect();
        let second = q
            .pairs
            .iter()
            .enumerate()
            .map(|(n, &(i, j))| {
                let mut rhs = p.second[n].clone();
                Self::gemm(-1.0, &q.second[n], &diag, &mut rhs);
                if i == j {
                    Self::gemm(-2.0, &q.first[i], &first[i], &mut rhs);
                } else {
                    Self::gemm(-1.0, &q.first[i], &first[j], &mut rhs);
                    Self::gemm(-1.0, &q.first[j], &first[i], &mut rhs);
                }
                lu.solve(&rhs.view())
            })
            .collect();
        Ok(Blocks { diag, first, second, pairs: q.pairs })
    }
}

fn check_square<T: Scalar>(a: &ArrayView2<'_, T>, what: &'static str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!("{what} is {}x{}, expected square", a.nrows(), a.ncols())));
    }
    if !all_finite(a) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Matrix exponential by scaling and squaring with diagonal Padé
/// approximants (degree 3 to 13, picked from the 1-norm).
pub fn expm<T: Scalar>(a: &ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_square(a, "expm argument")?;
    EXPM_CALLS.with(|c| c.set(c.get() + 1));
    if a.nrows() == 0 {
        return Ok(a.to_owned());
    }
    Ok(pade_exponential(Dense(a.to_owned()))?.0)
}

/// Propagator of one time slice together with its control derivatives.
#[derive(Debug, Clone)]
pub struct SlicePropagators<T: Scalar> {
    pub p: Array2<T>,
    /// `dp[k] = ∂P/∂c_k`.
    pub dp: Vec<Array2<T>>,
    /// `∂²P/∂c_i∂c_j`, keyed with `i <= j`.
    pub d2p: BTreeMap<(usize, usize), Array2<T>>,
    pub dt: f64,
}

impl<T: Scalar> SlicePropagators<T> {
    pub fn d2p(&self, i: usize, j: usize) -> Option<&Array2<T>> {
        self.d2p.get(&(i.min(j), i.max(j)))
    }
}

/// Upper-triangle channel pairs `(i, j)`, `i <= j`, for `k` channels.
pub fn upper_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect()
}

fn normalize_pairs(pairs: &[(usize, usize)], k: usize) -> Result<Vec<(usize, usize)>> {
    let mut out: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
    if let Some(&(_, j)) = out.iter().find(|&&(_, j)| j >= k) {
        return Err(Error::InvalidArgument(format!("channel {j} out of range for {k} channels")));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Exponential of `generator` with its derivatives along `directions`.
///
/// Works on already scaled generators: the slice propagator is
/// `exp(generator)` and `directions[k]` is the derivative of the generator
/// with respect to control `k`. `order` is 1 or 2; for order 2 the second
/// derivatives of the listed pairs are produced.
pub fn generator_derivatives<T: Scalar>(
    generator: &ArrayView2<'_, T>,
    directions: &[Array2<T>],
    order: u8,
    pairs: &[(usize, usize)],
) -> Result<(Array2<T>, Vec<Array2<T>>, BTreeMap<(usize, usize), Array2<T>>)> {
    check_square(generator, "slice generator")?;
    let n = generator.nrows();
    for d in directions {
        if d.dim() != (n, n) {
            return Err(Error::Dimension(format!(
                "direction is {:?}, generator is {n}x{n}",
                d.dim()
            )));
        }
        if !all_finite(&d.view()) {
            return Err(Error::NonFinite("control direction"));
        }
    }
    let pairs = match order {
        1 => Vec::new(),
        2 => normalize_pairs(pairs, directions.len())?,
        _ => return Err(Error::InvalidArgument(format!("derivative order {order}"))),
    };
    let seed = Blocks {
        diag: generator.to_owned(),
        first: directions.to_vec(),
        second: vec![Array2::zeros((n, n)); pairs.len()],
        pairs: &pairs,
    };
    let out = pade_exponential(seed)?;
    let d2p = pairs.iter().copied().zip(out.second).collect();
    Ok((out.diag, out.first, d2p))
}

/// Slice propagator `P = exp(-i H dt)` with first (`order == 1`) or first
/// and second (`order == 2`) derivatives with respect to the coefficients
/// of `controls`.
///
/// `h_total` must already contain the drift, the control terms and `+iR`.
pub fn slice_propagator_with_derivs(
    h_total: &ArrayView2<'_, Complex64>,
    controls: &[Array2<Complex64>],
    dt: f64,
    order: u8,
    pairs: &[(usize, usize)],
) -> Result<SlicePropagators<Complex64>> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step {dt}")));
    }
    let step = Complex64::new(0.0, -dt);
    let generator = h_total.mapv(|x| x * step);
    let directions: Vec<_> = controls.iter().map(|h| h.mapv(|x| x * step)).collect();
    let (p, dp, d2p) = generator_derivatives(&generator.view(), &directions, order, pairs)?;
    Ok(SlicePropagators { p, dp, d2p, dt })
}

fn exp_of_augmented(blocks: &[Vec<Option<&Array2<Complex64>>>], dt: f64) -> Result<Array2<Complex64>> {
    let n = blocks[0].iter().flatten().next().map(|b| b.nrows()).unwrap_or(0);
    let size = blocks.len();
    let mut big = Array2::<Complex64>::zeros((size * n, size * n));
    for (r, row) in blocks.iter().enumerate() {
        for (c, b) in row.iter().enumerate() {
            if let Some(b) = b {
                big.slice_mut(s![r * n..(r + 1) * n, c * n..(c + 1) * n])
                    .assign(&b.mapv(|x| x * Complex64::new(0.0, -dt)));
            }
        }
    }
    expm(&big.view())
}

/// Dense 2x2 auxiliary exponential; returns `(P, ∂P/∂c)` read from the
/// diagonal and top-right blocks.
pub fn first_derivative_dense(
    h: &Array2<Complex64>,
    hk: &Array2<Complex64>,
    dt: f64,
) -> Result<(Array2<Complex64>, Array2<Complex64>)> {
    let n = h.nrows();
    let e = exp_of_augmented(&[vec![Some(h), Some(hk)], vec![None, Some(h)]], dt)?;
    Ok((e.slice(s![..n, ..n]).to_owned(), e.slice(s![..n, n..]).to_owned()))
}

/// Blocks read from the dense 3x3 auxiliary exponential.
#[derive(Debug, Clone)]
pub struct DenseSecondOrder {
    pub diagonal: [Array2<Complex64>; 3],
    pub upper: Array2<Complex64>,
    pub lower: Array2<Complex64>,
    pub corner: Array2<Complex64>,
}

pub fn second_derivative_dense(
    h: &Array2<Complex64>,
    hi: &Array2<Complex64>,
    hj: &Array2<Complex64>,
    dt: f64,
) -> Result<DenseSecondOrder> {
    let n = h.nrows();
    let e = exp_of_augmented(
        &[
            vec![Some(h), Some(hi), None],
            vec![None, Some(h), Some(hj)],
            vec![None, None, Some(h)],
        ],
        dt,
    )?;
    let block = |r: usize, c: usize| e.slice(s![r * n..(r + 1) * n, c * n..(c + 1) * n]).to_owned();
    Ok(DenseSecondOrder {
        diagonal: [block(0, 0), block(1, 1), block(2, 2)],
        upper: block(0, 1),
        lower: block(1, 2),
        corner: block(0, 2),
    })
}
