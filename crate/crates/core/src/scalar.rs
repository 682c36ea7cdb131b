//! Real scalars and forward-mode dual numbers.
//!
//! Every evaluator in the crate is generic over [`Scalar`], so the same code
//! path that produces a force vector also produces its exact derivatives when
//! instantiated with [`Dual`]. Nesting (`Dual<Dual<f64>>`) yields second-order
//! derivatives on demand.

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Field-like number type used by all generic evaluators.
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
    + SubAssign
    + MulAssign
{
    fn cst(c: f64) -> Self;
    /// Real (primal) part.
    fn re(&self) -> f64;
    /// True when the primal part and every derivative part are finite.
    fn is_finite(&self) -> bool;
    /// `Some` only for plain reals; dual numbers return `None`.
    fn to_f64(&self) -> Option<f64> {
        None
    }

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }

    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { Self::one() / self } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(c: f64) -> Self {
        c
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    #[inline]
    fn to_f64(&self) -> Option<f64> {
        Some(*self)
    }
    #[inline]
    fn sin(self) -> Self {
        libm::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        libm::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
}

/// Dual number `re + eps·ε` with `ε² = 0`, generic over its component type.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual<S> {
    pub re: S,
    pub eps: S,
}

pub type Dual64 = Dual<f64>;

impl<S: Scalar> Dual<S> {
    pub fn new(re: S, eps: S) -> Self {
        Dual { re, eps }
    }

    /// Independent variable: derivative part 1.
    pub fn var(re: S) -> Self {
        Dual { re, eps: S::one() }
    }

    pub fn constant(re: S) -> Self {
        Dual { re, eps: S::zero() }
    }

    /// Lift a slice, seeding direction `seed` (if any) with unit tangent.
    pub fn seeded(values: &[S], seed: Option<usize>) -> alloc::vec::Vec<Self> {
        values
            .iter()
            .enumerate()
            .map(|(i, &x)| if Some(i) == seed { Dual::var(x) } else { Dual::constant(x) })
            .collect()
    }

    /// Lift a slice with an explicit tangent vector.
    pub fn with_tangent(values: &[S], tangent: &[S]) -> alloc::vec::Vec<Self> {
        values.iter().zip(tangent).map(|(&re, &eps)| Dual { re, eps }).collect()
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual { re: self.re + o.re, eps: self.eps + o.eps }
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual { re: self.re - o.re, eps: self.eps - o.eps }
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual { re: self.re * o.re, eps: self.re * o.eps + self.eps * o.re }
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = S::one() / o.re;
        let q = self.re * inv;
        Dual { re: q, eps: (self.eps - q * o.eps) * inv }
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual { re: -self.re, eps: -self.eps }
    }
}

impl<S: Scalar> AddAssign for Dual<S> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: Scalar> SubAssign for Dual<S> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<S: Scalar> MulAssign for Dual<S> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    #[inline]
    fn cst(c: f64) -> Self {
        Dual::constant(S::cst(c))
    }
    #[inline]
    fn re(&self) -> f64 {
        self.re.re()
    }
    fn is_finite(&self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }
    fn sin(self) -> Self {
        Dual { re: self.re.sin(), eps: self.eps * self.re.cos() }
    }
    fn cos(self) -> Self {
        Dual { re: self.re.cos(), eps: -(self.eps * self.re.sin()) }
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual { re: e, eps: self.eps * e }
    }
    fn ln(self) -> Self {
        Dual { re: self.re.ln(), eps: self.eps / self.re }
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual { re: s, eps: self.eps / (s + s) }
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual { re: t, eps: self.eps * (S::one() - t * t) }
    }
}

/// `∂f/∂x_i` at `x` for a scalar function written generically.
pub fn partial<F>(f: F, x: &[f64], i: usize) -> f64
where
    F: Fn(&[Dual64]) -> Dual64,
{
    f(&Dual::seeded(x, Some(i))).eps
}
