//! Scalars that can carry forward-mode derivatives.
//!
//! The sweep code is written once over [`Scalar`]. Instantiated with `f64` it
//! computes plain estimates; instantiated with [`Dual`] it propagates the
//! partial derivatives of every intermediate quantity with respect to up to
//! [`MAX_PARAMS`] parameters.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Largest parameter vector a [`Dual`] can differentiate against.
pub const MAX_PARAMS: usize = 9;

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    /// Same value, no derivative information.
    fn detach(self) -> Self {
        Self::constant(self.value())
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Value plus gradient with respect to a fixed-length parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; MAX_PARAMS],
}

impl Dual {
    /// The `index`-th independent variable, with value `v`.
    pub fn variable(v: f64, index: usize) -> Self {
        let mut d = [0.0; MAX_PARAMS];
        d[index] = 1.0;
        Dual { v, d }
    }

    pub fn grad(&self) -> &[f64; MAX_PARAMS] {
        &self.d
    }

    #[inline]
    fn map_d(self, f: impl Fn(f64) -> f64) -> [f64; MAX_PARAMS] {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = f(*x);
        }
        d
    }
}

impl Scalar for Dual {
    #[inline]
    fn constant(v: f64) -> Self {
        Dual {
            v,
            d: [0.0; MAX_PARAMS],
        }
    }
    #[inline]
    fn value(&self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual {
            v: e,
            d: self.map_d(|x| x * e),
        }
    }
    #[inline]
    fn ln(self) -> Self {
        let inv = 1.0 / self.v;
        Dual {
            v: self.v.ln(),
            d: self.map_d(|x| x * inv),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(mut self, rhs: Dual) -> Dual {
        self.v += rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a += *b;
        }
        self
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, rhs: Dual) {
        *self = *self + rhs;
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(mut self, rhs: Dual) -> Dual {
        self.v -= rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a -= *b;
        }
        self
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        let mut d = [0.0; MAX_PARAMS];
        for i in 0..MAX_PARAMS {
            d[i] = self.d[i] * rhs.v + rhs.d[i] * self.v;
        }
        Dual {
            v: self.v * rhs.v,
            d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        let q = self.v / rhs.v;
        let inv = 1.0 / rhs.v;
        let mut d = [0.0; MAX_PARAMS];
        for i in 0..MAX_PARAMS {
            d[i] = (self.d[i] - q * rhs.d[i]) * inv;
        }
        Dual { v: q, d }
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.map_d(|x| -x),
        }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn add(mut self, rhs: f64) -> Dual {
        self.v += rhs;
        self
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn sub(mut self, rhs: f64) -> Dual {
        self.v -= rhs;
        self
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: f64) -> Dual {
        Dual {
            v: self.v * rhs,
            d: self.map_d(|x| x * rhs),
        }
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: f64) -> Dual {
        self * (1.0 / rhs)
    }
}

/// `log Σ exp(x_i)`, stable for large magnitudes. Entries equal to `-inf`
/// contribute nothing; an all `-inf` input returns `-inf`.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let m = xs
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return S::constant(f64::NEG_INFINITY);
    }
    if m == f64::INFINITY {
        return S::constant(f64::INFINITY);
    }
    let mut acc = S::constant(0.0);
    for x in xs {
        if x.value() > f64::NEG_INFINITY {
            acc += (*x - m).exp();
        }
    }
    acc.ln() + m
}
