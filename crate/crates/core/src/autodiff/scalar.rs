use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

/// Number type the generic jet code runs on: plain `f64`, or a taped
/// [`Var`](super::Var) when parameter gradients are wanted.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(&self) -> f64;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn relu(self) -> Self;
    fn abs(self) -> Self;

    fn scale(self, k: f64) -> Self {
        self * Self::from_f64(k)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
}
