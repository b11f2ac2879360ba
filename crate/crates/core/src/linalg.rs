//! Small dense helpers shared by the propagation code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn identity<T: Scalar>(n: usize) -> Array2<T> {
    Array2::from_diag_elem(n, T::one())
}

/// Maximum absolute column sum.
pub fn norm1<T: Scalar>(a: &ArrayView2<'_, T>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|x| x.modulus()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn frobenius<T: Scalar>(a: &ArrayView2<'_, T>) -> f64 {
    a.iter().map(|x| x.modulus().powi(2)).sum::<f64>().sqrt()
}

pub fn kron<T: Scalar>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>) -> Array2<T> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for ((i, j), &x) in a.indexed_iter() {
        if x == T::zero() {
            continue;
        }
        out.slice_mut(ndarray::s![i * br..(i + 1) * br, j * bc..(j + 1) * bc])
            .assign(&b.mapv(|y| x * y));
    }
    out
}

/// Conjugate transpose.
pub fn adjoint<T: Scalar>(a: &ArrayView2<'_, T>) -> Array2<T> {
    a.t().mapv(|x| x.conj())
}

/// `⟨a|b⟩ = Σ conj(aᵢ) bᵢ`.
pub fn inner<T: Scalar>(a: &ArrayView1<'_, T>, b: &ArrayView1<'_, T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (&x, &y)| acc + x.conj() * y)
}

/// `A† v` without forming the adjoint.
pub fn adjoint_matvec<T: Scalar>(a: &ArrayView2<'_, T>, v: &ArrayView1<'_, T>) -> Array1<T> {
    let mut out = Array1::zeros(a.ncols());
    for (row, &vi) in a.rows().into_iter().zip(v.iter()) {
        for (o, &x) in out.iter_mut().zip(row.iter()) {
            *o += x.conj() * vi;
        }
    }
    out
}

pub fn all_finite<T: Scalar>(a: &ArrayView2<'_, T>) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// LU factorisation with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu<T: Scalar> {
    lu: Array2<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &ArrayView2<'_, T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("LU of {}x{} matrix", n, a.ncols())));
        }
        let mut lu = a.as_standard_layout().into_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = lu.iter().map(|x| x.modulus()).fold(0.0, f64::max);
        let buf = lu.as_slice_mut().expect("standard layout");
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, buf[i * n + k].modulus()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax <= f64::EPSILON * scale * n as f64 || pmax == 0.0 {
                return Err(Error::Singular("LU factorisation"));
            }
            if p != k {
                for j in 0..n {
                    buf.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = buf[k * n + k];
            for i in k + 1..n {
                let f = buf[i * n + k] / pivot;
                buf[i * n + k] = f;
                if f == T::zero() {
                    continue;
                }
                for j in k + 1..n {
                    let u = buf[k * n + j];
                    buf[i * n + j] -= f * u;
                }
            }
        }
        Ok(Self { lu, perm })
    }

    /// Solves `A X = B` for a matrix right-hand side.
    pub fn solve(&self, b: &ArrayView2<'_, T>) -> Array2<T> {
        let n = self.lu.nrows();
        let m = b.ncols();
        let mut x = Array2::zeros((n, m));
        for (i, &p) in self.perm.iter().enumerate() {
            x.row_mut(i).assign(&b.row(p));
        }
        let lu = self.lu.as_slice().expect("standard layout");
        let xs = x.as_slice_mut().expect("standard layout");
        for i in 0..n {
            for k in 0..i {
                let l = lu[i * n + k];
                if l == T::zero() {
                    continue;
                }
                let (head, tail) = xs.split_at_mut(i * m);
                let src = &head[k * m..(k + 1) * m];
                for (d, &s) in tail[..m].iter_mut().zip(src) {
                    *d -= l * s;
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = lu[i * n + k];
                if u == T::zero() {
                    continue;
                }
                let (head, tail) = xs.split_at_mut(k * m);
                let src = &tail[..m];
                for (d, &s) in head[i * m..(i + 1) * m].iter_mut().zip(src) {
                    *d -= u * s;
                }
            }
            let d = lu[i * n + i];
            for v in xs[i * m..(i + 1) * m].iter_mut() {
                *v = *v / d;
            }
        }
        x
    }
}
