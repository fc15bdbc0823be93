use super::Scalar;
use crate::diffops::DiffMonomial;
use crate::error::{Error, Result};

/// Index of `(i, j)`, `i <= j`, in a packed upper triangle of a `dim × dim` matrix.
#[inline]
pub fn packed_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * dim - i * i.saturating_sub(1) / 2 + j - i
}

/// Value of a function together with its input derivatives up to second order.
///
/// The Hessian is stored as a packed upper triangle, so it is symmetric by
/// construction. Components beyond `order` are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet2<S = f64> {
    order: usize,
    pub value: S,
    pub grad: Vec<S>,
    hess: Vec<S>,
}

impl<S: Scalar> Jet2<S> {
    pub fn constant(value: S, dim: usize, order: usize) -> Self {
        let zero = S::from_f64(0.0);
        Jet2 {
            order,
            value,
            grad: if order >= 1 { vec![zero; dim] } else { Vec::new() },
            hess: if order >= 2 {
                vec![zero; dim * (dim + 1) / 2]
            } else {
                Vec::new()
            },
        }
    }

    /// The coordinate function `x ↦ x_axis` evaluated at `value`.
    pub fn variable(value: S, axis: usize, dim: usize, order: usize) -> Self {
        let mut j = Self::constant(value, dim, order);
        if order >= 1 {
            j.grad[axis] = S::from_f64(1.0);
        }
        j
    }

    pub fn from_parts(value: S, grad: Vec<S>, hess_packed: Vec<S>) -> Self {
        let order = if !hess_packed.is_empty() {
            2
        } else if !grad.is_empty() {
            1
        } else {
            0
        };
        Jet2 {
            order,
            value,
            grad,
            hess: hess_packed,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn hess(&self, i: usize, j: usize) -> S {
        self.hess[packed_index(self.grad.len(), i, j)]
    }

    pub fn hess_packed(&self) -> &[S] {
        &self.hess
    }

    /// Full mirrored Hessian.
    pub fn hessian_matrix(&self) -> Vec<Vec<S>> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.hess(i, j)).collect())
            .collect()
    }

    /// `∂^α` of the function, for `|α| <= order`.
    pub fn partial(&self, monomial: &DiffMonomial) -> Result<S> {
        let degree = monomial.degree();
        if degree > self.order {
            return Err(Error::Capability {
                requested: degree,
                supported: self.order,
            });
        }
        let axes = monomial.axes();
        Ok(match axes.as_slice() {
            [] => self.value,
            [k] => self.grad[*k],
            [i, j] => self.hess(*i, *j),
            _ => unreachable!("jets stop at second order"),
        })
    }

    /// `φ(self)` given `φ, φ', φ''` evaluated at `self.value`.
    pub fn map(&self, f: S, d1: S, d2: S) -> Jet2<S> {
        let d = self.dim();
        let grad = self.grad.iter().map(|&g| d1 * g).collect();
        let mut hess = Vec::with_capacity(self.hess.len());
        if self.order >= 2 {
            for i in 0..d {
                for j in i..d {
                    hess.push(d2 * self.grad[i] * self.grad[j] + d1 * self.hess(i, j));
                }
            }
        }
        Jet2 {
            order: self.order,
            value: f,
            grad,
            hess,
        }
    }

    /// `bias + Σ w_i z_i`, accumulated left to right starting from `bias`.
    pub fn affine(weights: &[S], inputs: &[Jet2<S>], bias: S) -> Jet2<S> {
        let first = &inputs[0];
        let mut out = Jet2::constant(bias, first.dim(), first.order);
        for (&w, z) in weights.iter().zip(inputs) {
            out.value = out.value + w * z.value;
            for (o, &g) in out.grad.iter_mut().zip(&z.grad) {
                *o = *o + w * g;
            }
            for (o, &h) in out.hess.iter_mut().zip(&z.hess) {
                *o = *o + w * h;
            }
        }
        out
    }

    pub fn add(&self, other: &Jet2<S>) -> Jet2<S> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Jet2<S>) -> Jet2<S> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, k: S) -> Jet2<S> {
        Jet2 {
            order: self.order,
            value: k * self.value,
            grad: self.grad.iter().map(|&g| k * g).collect(),
            hess: self.hess.iter().map(|&h| k * h).collect(),
        }
    }

    pub fn mul(&self, other: &Jet2<S>) -> Jet2<S> {
        let d = self.dim();
        let order = self.order.min(other.order);
        let grad = if order >= 1 {
            (0..d)
                .map(|k| self.grad[k] * other.value + self.value * other.grad[k])
                .collect()
        } else {
            Vec::new()
        };
        let mut hess = Vec::new();
        if order >= 2 {
            for i in 0..d {
                for j in i..d {
                    hess.push(
                        self.hess(i, j) * other.value
                            + self.grad[i] * other.grad[j]
                            + self.grad[j] * other.grad[i]
                            + self.value * other.hess(i, j),
                    );
                }
            }
        }
        Jet2 {
            order,
            value: self.value * other.value,
            grad,
            hess,
        }
    }

    pub fn tanh(&self) -> Jet2<S> {
        let t = self.value.tanh();
        let d1 = S::from_f64(1.0) - t * t;
        self.map(t, d1, S::from_f64(-2.0) * t * d1)
    }

    pub fn sin(&self) -> Jet2<S> {
        let s = self.value.sin();
        self.map(s, self.value.cos(), -s)
    }

    pub fn cos(&self) -> Jet2<S> {
        let c = self.value.cos();
        self.map(c, -self.value.sin(), -c)
    }

    pub fn exp(&self) -> Jet2<S> {
        let e = self.value.exp();
        self.map(e, e, e)
    }

    fn zip(&self, other: &Jet2<S>, f: impl Fn(S, S) -> S) -> Jet2<S> {
        let order = self.order.min(other.order);
        Jet2 {
            order,
            value: f(self.value, other.value),
            grad: if order >= 1 {
                self.grad.iter().zip(&other.grad).map(|(&a, &b)| f(a, b)).collect()
            } else {
                Vec::new()
            },
            hess: if order >= 2 {
                self.hess.iter().zip(&other.hess).map(|(&a, &b)| f(a, b)).collect()
            } else {
                Vec::new()
            },
        }
    }
}

impl Jet2<f64> {
    /// Truncate to a lower order.
    pub fn truncate(&self, order: usize) -> Jet2<f64> {
        let order = order.min(self.order);
        Jet2 {
            order,
            value: self.value,
            grad: if order >= 1 { self.grad.clone() } else { Vec::new() },
            hess: if order >= 2 { self.hess.clone() } else { Vec::new() },
        }
    }
}
