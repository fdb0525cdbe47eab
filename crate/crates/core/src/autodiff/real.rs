//! Scalar abstraction shared by plain `f64` evaluation and forward-mode
//! dual numbers.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(softplus(x), sigmoid(x))` from a single exponential.
#[inline]
pub fn softplus_with_slope(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let u = 1.0 + e;
    // Goldberg's log1p: exact-to-ulps without calling ln_1p.
    let l = if u == 1.0 { e } else { u.ln() * (e / (u - 1.0)) };
    let inv = 1.0 / u;
    if x >= 0.0 {
        (x + l, inv)
    } else {
        (l, e * inv)
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar type the model and the data generators are generic over.
///
/// Implemented for `f64` (plain evaluation) and [`Dual`] (exact
/// directional derivatives).
pub trait Real:
    Copy
    + fmt::Debug
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
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn softplus(self) -> Self;
    fn sigmoid(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn sqrt(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn max_const(self, c: f64) -> Self;
}

impl Real for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn max_const(self, c: f64) -> Self {
        self.max(c)
    }
}

/// Forward-mode dual number `value + tangent·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub value: f64,
    pub tangent: f64,
}

impl Dual {
    pub const fn new(value: f64, tangent: f64) -> Self {
        Self { value, tangent }
    }

    pub const fn constant(value: f64) -> Self {
        Self { value, tangent: 0.0 }
    }

    /// Seeds a vector of duals at `x` along direction `d`.
    pub fn seed(x: &[f64], d: &[f64]) -> Vec<Dual> {
        x.iter().zip(d).map(|(&v, &t)| Dual::new(v, t)).collect()
    }

    #[inline]
    fn chain(self, value: f64, slope: f64) -> Self {
        Dual::new(value, self.tangent * slope)
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.value + rhs.value, self.tangent + rhs.tangent)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.value - rhs.value, self.tangent - rhs.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(
            self.value * rhs.value,
            self.tangent * rhs.value + self.value * rhs.tangent,
        )
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.value;
        Dual::new(
            self.value * inv,
            (self.tangent * rhs.value - self.value * rhs.tangent) * inv * inv,
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.value, -self.tangent)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, rhs: Dual) {
        *self = *self + rhs;
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: f64) -> Dual {
        Dual::new(self.value + rhs, self.tangent)
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: f64) -> Dual {
        Dual::new(self.value - rhs, self.tangent)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: f64) -> Dual {
        Dual::new(self.value * rhs, self.tangent * rhs)
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: f64) -> Dual {
        Dual::new(self.value / rhs, self.tangent / rhs)
    }
}

impl Real for Dual {
    #[inline]
    fn constant(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.value
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        // Non-positive arguments propagate NaN; callers check finiteness.
        self.chain(self.value.ln(), 1.0 / self.value)
    }
    #[inline]
    fn softplus(self) -> Self {
        self.chain(softplus(self.value), sigmoid(self.value))
    }
    #[inline]
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.value);
        self.chain(s, s * (1.0 - s))
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Dual::constant(1.0);
        }
        self.chain(self.value.powi(n), n as f64 * self.value.powi(n - 1))
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s)
    }
    #[inline]
    fn cos(self) -> Self {
        self.chain(self.value.cos(), -self.value.sin())
    }
    #[inline]
    fn abs(self) -> Self {
        // One-sided at the kink: d|x|/dx := +1 at x = 0.
        let slope = if self.value >= 0.0 { 1.0 } else { -1.0 };
        self.chain(self.value.abs(), slope)
    }
    #[inline]
    fn max_const(self, c: f64) -> Self {
        if self.value >= c {
            self
        } else {
            Dual::constant(c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn fused_softplus_matches_separate_calls() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.01 + 1e-3;
            let (sp, s) = softplus_with_slope(x);
            assert!((sp - softplus(x)).abs() <= 4.0 * f64::EPSILON * softplus(x), "{x}");
            assert!((s - sigmoid(x)).abs() <= 4.0 * f64::EPSILON * sigmoid(x), "{x}");
        }
        assert_eq!(softplus_with_slope(-800.0), (0.0, 0.0));
        assert_eq!(softplus_with_slope(800.0), (800.0, 1.0));
    }

    #[test]
    fn product_and_quotient_rules() {
        let a = Dual::new(3.0, 1.0);
        let b = Dual::new(5.0, 0.0);
        assert_eq!((a * b).tangent, 5.0);
        let q = a / Dual::new(2.0, 1.0);
        assert!((q.tangent - (1.0 * 2.0 - 3.0 * 1.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn primitives_match_finite_differences() {
        let xs = [-2.3, -0.4, 0.1, 0.9, 1.7, 3.2];
        for &x in &xs {
            let d = Dual::new(x, 1.0);
            let checks: [(f64, f64); 6] = [
                (d.exp().tangent, fd(f64::exp, x)),
                (d.softplus().tangent, fd(softplus, x)),
                (d.sigmoid().tangent, fd(sigmoid, x)),
                (d.powi(3).tangent, fd(|v| v.powi(3), x)),
                (d.cos().tangent, fd(f64::cos, x)),
                ((d * d * 2.0 + 1.0).tangent, fd(|v| 2.0 * v * v + 1.0, x)),
            ];
            for (analytic, numeric) in checks {
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-6, "x={x} analytic={analytic} numeric={numeric}");
            }
            if x > 0.0 {
                let rel = (d.ln().tangent - 1.0 / x).abs() * x;
                assert!(rel < 1e-12);
                assert!((d.sqrt().tangent - fd(f64::sqrt, x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stable_softplus_extremes() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
