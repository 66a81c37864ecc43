//! Double-double arithmetic (an unevaluated sum `hi + lo` of two `f64`s,
//! roughly 106 significant bits). Only what the finite-difference oracle
//! needs: field operations, `exp`, and the supported activations.

use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::model::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: core::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

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
    (p, libm::fma(a, b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    #[inline]
    pub const fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// `a · b` without rounding.
    #[inline]
    pub fn mul_f64(a: f64, b: f64) -> Self {
        let (hi, lo) = two_prod(a, b);
        Dd { hi, lo }
    }

    fn ldexp(self, k: i32) -> Self {
        Dd {
            hi: libm::ldexp(self.hi, k),
            lo: libm::ldexp(self.lo, k),
        }
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = libm::round(self.hi / LN2.hi);
        // r = (x − k ln 2) / 1024, |r| ≤ 3.4e-4
        let r = (self - LN2 * Dd::from_f64(k)).ldexp(-10);
        // e^r − 1 by Taylor series
        let mut term = r;
        let mut sum = r;
        let mut i = 2.0;
        while libm::fabs(term.hi) > 1e-36 {
            term = term * r / Dd::from_f64(i);
            sum = sum + term;
            i += 1.0;
        }
        // (1 + t)² − 1 = 2t + t², ten times
        for _ in 0..10 {
            sum = sum.ldexp(1) + sum * sum;
        }
        (sum + Dd::ONE).ldexp(k as i32)
    }

    /// `ln(1 + u)` for `u ≥ 0`, by Newton steps on `exp`.
    fn ln_1p_nonneg(u: Dd) -> Dd {
        let one_plus = Dd::ONE + u;
        let mut x = Dd::from_f64(libm::log1p(u.to_f64()));
        for _ in 0..2 {
            x = x + one_plus * (-x).exp() - Dd::ONE;
        }
        x
    }

    pub fn softplus(self) -> Self {
        if self.hi > 0.0 {
            self + Dd::ln_1p_nonneg((-self).exp())
        } else {
            Dd::ln_1p_nonneg(self.exp())
        }
    }

    pub fn logistic(self) -> Self {
        if self.hi >= 0.0 {
            Dd::ONE / (Dd::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Dd::ONE + e)
        }
    }

    pub fn activation(self, act: Activation) -> Self {
        match act {
            Activation::Softplus => self.softplus(),
            Activation::Sigmoid => self.logistic(),
            Activation::Identity => self,
            Activation::Zero => Dd::ZERO,
        }
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::from_f64(x)
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        let e = e + (self.hi * b.lo + self.lo * b.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from_f64(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}
