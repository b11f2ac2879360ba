//! Element types for the propagation code.
//!
//! Liouville-space generators of Hermitian Hamiltonians are real in the
//! product-operator basis, so every numerical kernel is written once against
//! [`Scalar`] and instantiated for both `f64` and `Complex64`.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, Neg, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_complex::Complex64;

pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + PartialEq
    + Debug
    + Send
    + Sync
{
    /// Short tag naming the element type; enters cache keys.
    const KIND: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_complex(self) -> Complex64;
    /// Narrowing conversion, `None` when the imaginary part is nonzero.
    fn from_complex(z: Complex64) -> Option<Self>;
    fn conj(self) -> Self;
    fn re(self) -> f64;
    fn modulus(self) -> f64;
    fn is_finite(self) -> bool;
    fn write_le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f64 {
    const KIND: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_complex(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
    fn from_complex(z: Complex64) -> Option<Self> {
        (z.im == 0.0).then_some(z.re)
    }
    fn conj(self) -> Self {
        self
    }
    fn re(self) -> f64 {
        self
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for Complex64 {
    const KIND: &'static str = "c64";

    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn to_complex(self) -> Complex64 {
        self
    }
    fn from_complex(z: Complex64) -> Option<Self> {
        Some(z)
    }
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn is_finite(self) -> bool {
        Complex64::is_finite(self)
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.re.to_le_bytes());
        out.extend_from_slice(&self.im.to_le_bytes());
    }
}
