//! Double-double arithmetic (about 106 significant bits).
//!
//! Used by the reference objective so that central differences are limited
//! by truncation error rather than by `f64` rounding in the loss.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Scalar type the reference objective is generic over.
pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Wide {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Wide = Wide { hi: 0.6931471805599453, lo: 2.3190468138462996e-17 };

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Wide {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn ldexp(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Self { hi: self.hi * f, lo: self.lo * f }
    }

    fn exp_impl(self) -> Self {
        if self.hi > 709.0 {
            return Self::new(f64::INFINITY, 0.0);
        }
        if self.hi < -745.0 {
            return Self::new(0.0, 0.0);
        }
        // x = k ln2 + r, then exp(r) = exp(r / 2^m)^(2^m).
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2 * Wide::from(k);
        const M: i32 = 10;
        let r = r.ldexp(-M);
        // Taylor series for exp(r) - 1; |r| < 3.4e-4 so 12 terms suffice.
        // Squaring in the expm1 form avoids amplifying rounding.
        let mut term = r;
        let mut s = r;
        for n in 2..=12 {
            term = term * r / Wide::from(n as f64);
            s += term;
        }
        for _ in 0..M {
            s = s * (s + Wide::from(2.0));
        }
        (s + Wide::from(1.0)).ldexp(k as i32)
    }

    fn ln_impl(self) -> Self {
        if !(self.hi > 0.0) {
            return Self::new(f64::NAN, 0.0);
        }
        // Newton on exp(y) = x; each step doubles the correct bits.
        let mut y = Wide::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp_impl() - Wide::from(1.0);
        }
        y
    }
}

impl From<f64> for Wide {
    fn from(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }
}

impl Add for Wide {
    type Output = Wide;
    #[inline]
    fn add(self, b: Wide) -> Wide {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Wide::renorm(s1, s2 + t2)
    }
}

impl AddAssign for Wide {
    #[inline]
    fn add_assign(&mut self, b: Wide) {
        *self = *self + b;
    }
}

impl Neg for Wide {
    type Output = Wide;
    #[inline]
    fn neg(self) -> Wide {
        Wide { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Wide {
    type Output = Wide;
    #[inline]
    fn sub(self, b: Wide) -> Wide {
        self + (-b)
    }
}

impl Mul for Wide {
    type Output = Wide;
    #[inline]
    fn mul(self, b: Wide) -> Wide {
        let (p1, p2) = two_prod(self.hi, b.hi);
        Wide::renorm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Wide {
    type Output = Wide;
    fn div(self, b: Wide) -> Wide {
        let q1 = self.hi / b.hi;
        let r = self - b * Wide::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Wide::from(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Wide { hi, lo } + Wide::from(q3)
    }
}

impl Real for Wide {
    fn from_f64(x: f64) -> Self {
        Wide::from(x)
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn exp(self) -> Self {
        self.exp_impl()
    }
    fn ln(self) -> Self {
        self.ln_impl()
    }
}
