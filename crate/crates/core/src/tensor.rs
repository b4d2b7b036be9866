//! Fixed-dimension (d = 2, 3) dense vector/matrix utilities and forward-mode
//! dual scalars shared by the mechanics, field and solver code.

use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("matrix is singular (|det| = {det:.3e} below guard {guard:.3e})")]
    SingularMatrix { det: f64, guard: f64 },
}

/// Rank-3 array indexed `[i][j][k]`; used for second displacement derivatives
/// H\[i\]\[j\]\[k\] = d2 u_i / dx_j dx_k, kept symmetric in (j, k).
pub type Rank3<T, const D: usize> = [[[T; D]; D]; D];

pub fn rank3_zero<T: Scalar, const D: usize>() -> Rank3<T, D> {
    [[[T::from_f64(0.0); D]; D]; D]
}

/// Scalar abstraction so the mechanics kernels run both on plain `f64` and on
/// forward-mode duals.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    /// Primal value (used for sign/singularity guards, never differentiated).
    fn value(&self) -> f64;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn value(&self) -> f64 {
        *self
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Forward-mode dual number carrying `N` simultaneous partial derivatives.
///
/// Arithmetic follows the exact sum/product/chain rules; `N` is chosen by the
/// caller to cover all inputs being differentiated in one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualScalar<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> DualScalar<N> {
    #[inline(always)]
    pub fn constant(re: f64) -> Self {
        Self { re, eps: [0.0; N] }
    }

    /// A variable seeded with derivative 1 in slot `slot`.
    #[inline(always)]
    pub fn seeded(re: f64, slot: usize) -> Self {
        let mut eps = [0.0; N];
        eps[slot] = 1.0;
        Self { re, eps }
    }
}

impl<const N: usize> Add for DualScalar<N> {
    type Output = Self;
    #[inline(always)]
    fn add(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps.iter()) {
            *e += *r;
        }
        Self {
            re: self.re + rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Sub for DualScalar<N> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps.iter()) {
            *e -= *r;
        }
        Self {
            re: self.re - rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Mul for DualScalar<N> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Self {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Div for DualScalar<N> {
    type Output = Self;
    #[inline(always)]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Self { re, eps }
    }
}

impl<const N: usize> Neg for DualScalar<N> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = -*e;
        }
        Self { re: -self.re, eps }
    }
}

impl<const N: usize> Scalar for DualScalar<N> {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        Self::constant(x)
    }
    #[inline(always)]
    fn value(&self) -> f64 {
        self.re
    }
    #[inline(always)]
    fn ln(self) -> Self {
        let inv = 1.0 / self.re;
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= inv;
        }
        Self {
            re: self.re.ln(),
            eps,
        }
    }
}

/// Dense d-by-d matrix over any [`Scalar`]; d is 2 or 3 in this crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallMat<T, const D: usize> {
    pub e: [[T; D]; D],
}

impl<T: Scalar, const D: usize> SmallMat<T, D> {
    #[inline]
    pub fn zero() -> Self {
        Self {
            e: [[T::from_f64(0.0); D]; D],
        }
    }

    #[inline]
    pub fn identity() -> Self {
        let mut m = Self::zero();
        for i in 0..D {
            m.e[i][i] = T::from_f64(1.0);
        }
        m
    }

    pub fn from_rows(rows: [[f64; D]; D]) -> Self {
        let mut m = Self::zero();
        for i in 0..D {
            for j in 0..D {
                m.e[i][j] = T::from_f64(rows[i][j]);
            }
        }
        m
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        let mut m = Self::zero();
        for i in 0..D {
            for j in 0..D {
                m.e[i][j] = self.e[j][i];
            }
        }
        m
    }

    #[inline]
    pub fn matmul(&self, rhs: &Self) -> Self {
        let mut m = Self::zero();
        for i in 0..D {
            for j in 0..D {
                let mut s = T::from_f64(0.0);
                for k in 0..D {
                    s = s + self.e[i][k] * rhs.e[k][j];
                }
                m.e[i][j] = s;
            }
        }
        m
    }

    #[inline]
    pub fn matvec(&self, v: &[T; D]) -> [T; D] {
        let mut out = [T::from_f64(0.0); D];
        for i in 0..D {
            let mut s = T::from_f64(0.0);
            for j in 0..D {
                s = s + self.e[i][j] * v[j];
            }
            out[i] = s;
        }
        out
    }

    #[inline]
    pub fn scale(&self, c: T) -> Self {
        let mut m = *self;
        for i in 0..D {
            for j in 0..D {
                m.e[i][j] = m.e[i][j] * c;
            }
        }
        m
    }

    #[inline]
    pub fn add_mat(&self, rhs: &Self) -> Self {
        let mut m = *self;
        for i in 0..D {
            for j in 0..D {
                m.e[i][j] = m.e[i][j] + rhs.e[i][j];
            }
        }
        m
    }

    #[inline]
    pub fn sub_mat(&self, rhs: &Self) -> Self {
        let mut m = *self;
        for i in 0..D {
            for j in 0..D {
                m.e[i][j] = m.e[i][j] - rhs.e[i][j];
            }
        }
        m
    }

    /// Primal-valued copy (drops derivative parts for duals).
    pub fn value(&self) -> SmallMat<f64, D> {
        let mut m = SmallMat::<f64, D>::zero();
        for i in 0..D {
            for j in 0..D {
                m.e[i][j] = self.e[i][j].value();
            }
        }
        m
    }
}

/// Determinant by cofactor expansion (d = 1, 2, 3).
#[inline]
pub fn det<T: Scalar, const D: usize>(m: &SmallMat<T, D>) -> T {
    let e = &m.e;
    match D {
        1 => e[0][0],
        2 => e[0][0] * e[1][1] - e[0][1] * e[1][0],
        3 => {
            e[0][0] * (e[1][1] * e[2][2] - e[1][2] * e[2][1])
                - e[0][1] * (e[1][0] * e[2][2] - e[1][2] * e[2][0])
                + e[0][2] * (e[1][0] * e[2][1] - e[1][1] * e[2][0])
        }
        _ => unreachable!("only d = 1, 2, 3 are supported"),
    }
}

/// Sum of squared entries.
#[inline]
pub fn frob_norm_sq<T: Scalar, const D: usize>(m: &SmallMat<T, D>) -> T {
    let mut s = T::from_f64(0.0);
    for i in 0..D {
        for j in 0..D {
            s = s + m.e[i][j] * m.e[i][j];
        }
    }
    s
}

/// Singularity guard used by [`inv`]: 1e-12 * max(1, ||m||_F^d).
pub fn singularity_guard<T: Scalar, const D: usize>(m: &SmallMat<T, D>) -> f64 {
    let norm = frob_norm_sq(m).value().sqrt();
    1e-12 * norm.powi(D as i32).max(1.0)
}

/// Matrix inverse by adjugate; fails when |det| falls below the guard.
pub fn inv<T: Scalar, const D: usize>(m: &SmallMat<T, D>) -> Result<SmallMat<T, D>, TensorError> {
    let d = det(m);
    let guard = singularity_guard(m);
    if d.value().abs() <= guard {
        return Err(TensorError::SingularMatrix {
            det: d.value(),
            guard,
        });
    }
    let e = &m.e;
    let mut out = SmallMat::<T, D>::zero();
    match D {
        1 => {
            out.e[0][0] = T::from_f64(1.0) / d;
        }
        2 => {
            out.e[0][0] = e[1][1] / d;
            out.e[0][1] = -e[0][1] / d;
            out.e[1][0] = -e[1][0] / d;
            out.e[1][1] = e[0][0] / d;
        }
        3 => {
            // adjugate transpose: out[j][i] = cofactor(i, j) / det
            out.e[0][0] = (e[1][1] * e[2][2] - e[1][2] * e[2][1]) / d;
            out.e[1][0] = -(e[1][0] * e[2][2] - e[1][2] * e[2][0]) / d;
            out.e[2][0] = (e[1][0] * e[2][1] - e[1][1] * e[2][0]) / d;
            out.e[0][1] = -(e[0][1] * e[2][2] - e[0][2] * e[2][1]) / d;
            out.e[1][1] = (e[0][0] * e[2][2] - e[0][2] * e[2][0]) / d;
            out.e[2][1] = -(e[0][0] * e[2][1] - e[0][1] * e[2][0]) / d;
            out.e[0][2] = (e[0][1] * e[1][2] - e[0][2] * e[1][1]) / d;
            out.e[1][2] = -(e[0][0] * e[1][2] - e[0][2] * e[1][0]) / d;
            out.e[2][2] = (e[0][0] * e[1][1] - e[0][1] * e[1][0]) / d;
        }
        _ => unreachable!("only d = 1, 2, 3 are supported"),
    }
    Ok(out)
}

// small vector helpers over plain arrays

#[inline]
pub fn vdot<T: Scalar, const D: usize>(a: &[T; D], b: &[T; D]) -> T {
    let mut s = T::from_f64(0.0);
    for i in 0..D {
        s = s + a[i] * b[i];
    }
    s
}

#[inline]
pub fn vnorm_sq<T: Scalar, const D: usize>(a: &[T; D]) -> T {
    vdot(a, a)
}

#[inline]
pub fn vadd<T: Scalar, const D: usize>(a: &[T; D], b: &[T; D]) -> [T; D] {
    let mut out = *a;
    for i in 0..D {
        out[i] = out[i] + b[i];
    }
    out
}

#[inline]
pub fn vsub<T: Scalar, const D: usize>(a: &[T; D], b: &[T; D]) -> [T; D] {
    let mut out = *a;
    for i in 0..D {
        out[i] = out[i] - b[i];
    }
    out
}

#[inline]
pub fn vscale<T: Scalar, const D: usize>(a: &[T; D], c: T) -> [T; D] {
    let mut out = *a;
    for i in 0..D {
        out[i] = out[i] * c;
    }
    out
}
