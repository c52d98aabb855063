//! Second-order forward-mode differentiation.
//!
//! A [`Jet`] carries a value together with its gradient and full Hessian
//! with respect to `N` seed variables. Used where the expressions are short
//! and the variable count small: galaxy covariance algebra and the
//! closed-form KL terms.

use core::ops::{Add, Div, Mul, Neg, Sub};

#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const N: usize> {
    pub value: f64,
    pub grad: [f64; N],
    pub hess: [[f64; N]; N],
}

impl<const N: usize> Jet<N> {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            grad: [0.0; N],
            hess: [[0.0; N]; N],
        }
    }

    /// Seed variable `index` at `value`.
    pub fn variable(index: usize, value: f64) -> Self {
        let mut j = Self::constant(value);
        j.grad[index] = 1.0;
        j
    }

    /// Apply a scalar function given its value and first two derivatives at
    /// `self.value`.
    pub fn chain(&self, f: f64, df: f64, d2f: f64) -> Self {
        let mut out = Self::constant(f);
        for i in 0..N {
            out.grad[i] = df * self.grad[i];
        }
        for i in 0..N {
            for k in 0..N {
                out.hess[i][k] = df * self.hess[i][k] + d2f * self.grad[i] * self.grad[k];
            }
        }
        out
    }

    pub fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Self {
        let x = self.value;
        self.chain(x.ln(), 1.0 / x, -1.0 / (x * x))
    }

    pub fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.value))
    }

    pub fn sin(&self) -> Self {
        let (s, c) = (self.value.sin(), self.value.cos());
        self.chain(s, c, -s)
    }

    pub fn cos(&self) -> Self {
        let (s, c) = (self.value.sin(), self.value.cos());
        self.chain(c, -s, -c)
    }

    pub fn recip(&self) -> Self {
        let x = self.value;
        self.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }

    pub fn square(&self) -> Self {
        *self * *self
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut out = *self;
        out.value *= k;
        for i in 0..N {
            out.grad[i] *= k;
            for j in 0..N {
                out.hess[i][j] *= k;
            }
        }
        out
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.value += rhs.value;
        for i in 0..N {
            self.grad[i] += rhs.grad[i];
            for j in 0..N {
                self.hess[i][j] += rhs.hess[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::constant(self.value * rhs.value);
        for i in 0..N {
            out.grad[i] = self.grad[i] * rhs.value + rhs.grad[i] * self.value;
        }
        for i in 0..N {
            for k in 0..N {
                out.hess[i][k] = self.hess[i][k] * rhs.value
                    + rhs.hess[i][k] * self.value
                    + self.grad[i] * rhs.grad[k]
                    + rhs.grad[i] * self.grad[k];
            }
        }
        out
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl<const N: usize> Add<f64> for Jet<N> {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.value += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Jet<N> {
    type Output = Self;
    fn sub(mut self, rhs: f64) -> Self {
        self.value -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.scale(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(x: Jet<2>, y: Jet<2>) -> Jet<2> {
        (x * y).exp() / (x.square() + 1.0).sqrt() + y.sin() * x.ln()
    }

    fn f_scalar(x: f64, y: f64) -> f64 {
        (x * y).exp() / (x * x + 1.0).sqrt() + y.sin() * x.ln()
    }

    #[test]
    fn matches_finite_differences() {
        let (x0, y0) = (0.7, -0.4);
        let j = f(Jet::variable(0, x0), Jet::variable(1, y0));
        assert!((j.value - f_scalar(x0, y0)).abs() < 1e-15);
        let h = 1e-5;
        let gx = (f_scalar(x0 + h, y0) - f_scalar(x0 - h, y0)) / (2.0 * h);
        let gy = (f_scalar(x0, y0 + h) - f_scalar(x0, y0 - h)) / (2.0 * h);
        assert!((j.grad[0] - gx).abs() < 1e-8);
        assert!((j.grad[1] - gy).abs() < 1e-8);
        let h = 1e-4;
        let hxy = (f_scalar(x0 + h, y0 + h) - f_scalar(x0 + h, y0 - h) - f_scalar(x0 - h, y0 + h)
            + f_scalar(x0 - h, y0 - h))
            / (4.0 * h * h);
        assert!((j.hess[0][1] - hxy).abs() < 1e-6);
        assert!((j.hess[0][1] - j.hess[1][0]).abs() < 1e-15);
    }
}
