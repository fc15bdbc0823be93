//! Matrices of constant-coefficient linear differential operators.
//!
//! Coefficients are exact rationals so that products such as `C·G` can be
//! checked for being identically zero without rounding. Floating point only
//! appears when an operator is applied to a differentiable field.

mod builtin;
mod dsl;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::autodiff::{Jet2, JetField};
use crate::error::{Error, Result};

pub use builtin::{
    airy_strain, curl3d, curl_constraint3d, div, equilibrium_constraint, grad, poisson_ratio,
    rot_grad2d,
};
pub use dsl::parse_operator;

/// Exact rational coefficient.
pub type Coeff = BigRational;

/// Build an exact coefficient from a numerator/denominator pair.
/// The exact rational of a float's shortest round-trip decimal, e.g. `0.01 → 1/100`.
pub fn exact_decimal(v: f64) -> Option<Coeff> {
    if v.is_finite() {
        dsl::parse_decimal(&format!("{v}"))
    } else {
        None
    }
}

pub fn ratio(numer: i64, denom: i64) -> Coeff {
    BigRational::new(BigInt::from(numer), BigInt::from(denom))
}

/// A product of partial derivatives `∂^a1/∂x1^a1 · … · ∂^aD/∂xD^aD`.
///
/// Ordered by total degree, then lexicographically with `∂x1 ≻ ∂x2 ≻ …`,
/// so for two inputs the degree-2 monomials come out as `∂x1², ∂x1∂x2, ∂x2²`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DiffMonomial(Vec<u32>);

impl DiffMonomial {
    pub fn new(multi_index: Vec<u32>) -> Self {
        DiffMonomial(multi_index)
    }

    pub fn identity(input_dim: usize) -> Self {
        DiffMonomial(vec![0; input_dim])
    }

    /// First-order partial along `axis`.
    pub fn partial(input_dim: usize, axis: usize) -> Self {
        let mut m = vec![0; input_dim];
        m[axis] = 1;
        DiffMonomial(m)
    }

    pub fn multi_index(&self) -> &[u32] {
        &self.0
    }

    pub fn input_dim(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> usize {
        self.0.iter().map(|&a| a as usize).sum()
    }

    /// Composition of two partial-derivative monomials (adds multi-indices).
    pub fn mul(&self, other: &DiffMonomial) -> DiffMonomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        DiffMonomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Axes differentiated, with repetition, in ascending order.
    pub fn axes(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(axis, &k)| std::iter::repeat(axis).take(k as usize))
            .collect()
    }
}

impl Ord for DiffMonomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for DiffMonomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A scalar operator `Σ c_α ∂^α` in canonical form (no zero coefficients).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OperatorPoly {
    terms: BTreeMap<DiffMonomial, Coeff>,
}

impl OperatorPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn term(monomial: DiffMonomial, coeff: Coeff) -> Self {
        let mut p = Self::zero();
        p.add_term(monomial, coeff);
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&DiffMonomial, &Coeff)> {
        self.terms.iter()
    }

    pub fn coeff(&self, monomial: &DiffMonomial) -> Coeff {
        self.terms.get(monomial).cloned().unwrap_or_else(Coeff::zero)
    }

    pub fn add_term(&mut self, monomial: DiffMonomial, coeff: Coeff) {
        if coeff.is_zero() {
            return;
        }
        let slot = self.terms.entry(monomial).or_insert_with(Coeff::zero);
        *slot += coeff;
        if slot.is_zero() {
            // canonical form: drop cancelled terms
            self.terms.retain(|_, c| !c.is_zero());
        }
    }

    pub fn add(&self, other: &OperatorPoly) -> OperatorPoly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c.clone());
        }
        out
    }

    pub fn scale(&self, k: &Coeff) -> OperatorPoly {
        if k.is_zero() {
            return OperatorPoly::zero();
        }
        OperatorPoly {
            terms: self
                .terms
                .iter()
                .map(|(m, c)| (m.clone(), c * k))
                .collect(),
        }
    }

    pub fn mul(&self, other: &OperatorPoly) -> OperatorPoly {
        let mut out = OperatorPoly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(DiffMonomial::degree).max().unwrap_or(0)
    }

    /// Substitute `x = s·x'`, i.e. `∂/∂x = (1/s) ∂/∂x'`, coefficient-wise.
    fn rescale(&self, inv_scale: &Coeff) -> OperatorPoly {
        OperatorPoly {
            terms: self
                .terms
                .iter()
                .map(|(m, c)| {
                    let mut k = Coeff::one();
                    for _ in 0..m.degree() {
                        k *= inv_scale;
                    }
                    (m.clone(), c * k)
                })
                .collect(),
        }
    }
}

/// A `rows × cols` grid of scalar operators acting on functions `R^D → R^cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperatorMatrix {
    rows: usize,
    cols: usize,
    input_dim: usize,
    entries: Vec<OperatorPoly>,
}

impl OperatorMatrix {
    pub fn zeros(rows: usize, cols: usize, input_dim: usize) -> Self {
        OperatorMatrix {
            rows,
            cols,
            input_dim,
            entries: vec![OperatorPoly::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize, input_dim: usize) -> Self {
        let mut m = Self::zeros(n, n, input_dim);
        for i in 0..n {
            m.entries[i * n + i] = OperatorPoly::term(DiffMonomial::identity(input_dim), Coeff::one());
        }
        m
    }

    /// Build from row-major entries, checking every monomial's length.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        input_dim: usize,
        entries: Vec<OperatorPoly>,
    ) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} entries for a {rows}x{cols} operator matrix",
                entries.len()
            )));
        }
        for p in &entries {
            if let Some((m, _)) = p.terms().find(|(m, _)| m.input_dim() != input_dim) {
                return Err(Error::shape(format!(
                    "monomial of length {} in operator over {input_dim} inputs",
                    m.input_dim()
                )));
            }
        }
        Ok(OperatorMatrix {
            rows,
            cols,
            input_dim,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn entry(&self, row: usize, col: usize) -> &OperatorPoly {
        &self.entries[row * self.cols + col]
    }

    pub fn entry_mut(&mut self, row: usize, col: usize) -> &mut OperatorPoly {
        &mut self.entries[row * self.cols + col]
    }

    pub fn entries(&self) -> &[OperatorPoly] {
        &self.entries
    }

    pub fn max_derivative_order(&self) -> usize {
        self.entries.iter().map(OperatorPoly::degree).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(OperatorPoly::is_zero)
    }

    /// `self ∘ other`: matrix product with polynomial multiplication of entries.
    pub fn compose(&self, other: &OperatorMatrix) -> Result<OperatorMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot compose {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        if self.input_dim != other.input_dim {
            return Err(Error::shape(format!(
                "input dimensions differ: {} vs {}",
                self.input_dim, other.input_dim
            )));
        }
        let mut out = OperatorMatrix::zeros(self.rows, other.cols, self.input_dim);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = OperatorPoly::zero();
                for k in 0..self.cols {
                    let a = self.entry(i, k);
                    let b = other.entry(k, j);
                    if a.is_zero() || b.is_zero() {
                        continue;
                    }
                    acc = acc.add(&a.mul(b));
                }
                out.entries[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &OperatorMatrix) -> Result<OperatorMatrix> {
        if (self.rows, self.cols, self.input_dim) != (other.rows, other.cols, other.input_dim) {
            return Err(Error::shape("operator matrices of different shape"));
        }
        Ok(OperatorMatrix {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a.add(b))
                .collect(),
            ..self.clone()
        })
    }

    pub fn scale(&self, k: &Coeff) -> OperatorMatrix {
        OperatorMatrix {
            entries: self.entries.iter().map(|p| p.scale(k)).collect(),
            ..self.clone()
        }
    }

    /// Express the operator in coordinates `x' = x / scale`.
    ///
    /// A term of order `|α|` picks up a factor `scale^{-|α|}`.
    pub fn rescale_inputs(&self, scale: &Coeff) -> Result<OperatorMatrix> {
        if !scale.is_positive() {
            return Err(Error::Domain("input scale must be positive".into()));
        }
        let inv = scale.recip();
        Ok(OperatorMatrix {
            entries: self.entries.iter().map(|p| p.rescale(&inv)).collect(),
            ..self.clone()
        })
    }

    /// Lower to floating point for repeated application.
    pub fn to_float(&self) -> FloatOperator {
        let entries = self
            .entries
            .iter()
            .map(|p| {
                p.terms()
                    .map(|(m, c)| (m.clone(), c.to_f64().unwrap_or(f64::NAN)))
                    .collect()
            })
            .collect();
        FloatOperator {
            rows: self.rows,
            cols: self.cols,
            input_dim: self.input_dim,
            order: self.max_derivative_order(),
            entries,
        }
    }

    /// Evaluate `A[g](x)`, pulling partial derivatives of `g` from its jets.
    pub fn apply(&self, g: &dyn JetField, x: &[f64]) -> Result<Vec<f64>> {
        self.to_float().apply(g, x)
    }
}

impl fmt::Display for OperatorMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&dsl::format_operator(self))
    }
}

impl std::str::FromStr for OperatorMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_operator(s, None)
    }
}

/// Floating-point copy of an [`OperatorMatrix`].
#[derive(Clone, Debug)]
pub struct FloatOperator {
    rows: usize,
    cols: usize,
    input_dim: usize,
    order: usize,
    entries: Vec<Vec<(DiffMonomial, f64)>>,
}

impl FloatOperator {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entry(&self, row: usize, col: usize) -> &[(DiffMonomial, f64)] {
        &self.entries[row * self.cols + col]
    }

    pub fn apply(&self, g: &dyn JetField, x: &[f64]) -> Result<Vec<f64>> {
        if g.output_dim() != self.cols {
            return Err(Error::shape(format!(
                "operator expects {} field components, field has {}",
                self.cols,
                g.output_dim()
            )));
        }
        if x.len() != self.input_dim || g.input_dim() != self.input_dim {
            return Err(Error::shape(format!(
                "operator over {} inputs applied at a point of dimension {}",
                self.input_dim,
                x.len()
            )));
        }
        let jets = g.jets(x, self.order)?;
        self.apply_to_jets(&jets, &DiffMonomial::identity(self.input_dim))
    }

    /// Component `i` is `Σ_j Σ_α c_α ∂^{α+shift} g_j`, read off jets of `g`.
    pub fn apply_to_jets(&self, jets: &[Jet2], shift: &DiffMonomial) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, jet) in jets.iter().enumerate().take(self.cols) {
                for (m, c) in self.entry(i, j) {
                    *o += c * jet.partial(&m.mul(shift))?;
                }
            }
        }
        Ok(out)
    }
}

/// `A[g]` viewed as a field in its own right.
///
/// Jets of the transformed field come from higher-order jets of `g`:
/// `∂^β (A[g])_i = Σ_j Σ_α c_α ∂^{α+β} g_j`, so a field of order `k` under an
/// operator of order `m` yields jets up to order `k − m`.
pub struct TransformedField<'a> {
    op: FloatOperator,
    inner: &'a dyn JetField,
}

impl<'a> TransformedField<'a> {
    pub fn new(op: &OperatorMatrix, inner: &'a dyn JetField) -> Result<Self> {
        if op.cols() != inner.output_dim() || op.input_dim() != inner.input_dim() {
            return Err(Error::shape(format!(
                "{}x{} operator over {} inputs cannot act on a field R^{} -> R^{}",
                op.rows(),
                op.cols(),
                op.input_dim(),
                inner.input_dim(),
                inner.output_dim()
            )));
        }
        Ok(TransformedField {
            op: op.to_float(),
            inner,
        })
    }
}

impl JetField for TransformedField<'_> {
    fn input_dim(&self) -> usize {
        self.op.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.op.rows()
    }

    fn max_order(&self) -> usize {
        self.inner.max_order().saturating_sub(self.op.order())
    }

    fn jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet2>> {
        let needed = self.op.order() + order;
        if needed > self.inner.max_order() {
            return Err(Error::Capability {
                requested: needed,
                supported: self.inner.max_order(),
            });
        }
        let d = self.input_dim();
        let g = self.inner.jets(x, needed)?;
        let value = self.op.apply_to_jets(&g, &DiffMonomial::identity(d))?;
        let grads: Vec<Vec<f64>> = if order >= 1 {
            (0..d)
                .map(|k| self.op.apply_to_jets(&g, &DiffMonomial::partial(d, k)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut hess: Vec<Vec<f64>> = Vec::new();
        if order >= 2 {
            for i in 0..d {
                for j in i..d {
                    let shift = DiffMonomial::partial(d, i).mul(&DiffMonomial::partial(d, j));
                    hess.push(self.op.apply_to_jets(&g, &shift)?);
                }
            }
        }
        Ok((0..self.op.rows())
            .map(|r| {
                Jet2::from_parts(
                    value[r],
                    grads.iter().map(|gk| gk[r]).collect(),
                    hess.iter().map(|h| h[r]).collect(),
                )
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dx(d: usize, axis: usize) -> OperatorPoly {
        OperatorPoly::term(DiffMonomial::partial(d, axis), Coeff::one())
    }

    #[test]
    fn monomial_order_is_graded_with_x1_first() {
        let mut ms = vec![
            DiffMonomial::new(vec![0, 2]),
            DiffMonomial::new(vec![1, 0]),
            DiffMonomial::new(vec![1, 1]),
            DiffMonomial::new(vec![0, 0]),
            DiffMonomial::new(vec![2, 0]),
            DiffMonomial::new(vec![0, 1]),
        ];
        ms.sort();
        let got: Vec<_> = ms.iter().map(|m| m.multi_index().to_vec()).collect();
        assert_eq!(
            got,
            vec![
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2]
            ]
        );
    }

    #[test]
    fn toy_constraint_annihilates_rotated_gradient() {
        let c = OperatorMatrix::from_entries(1, 2, 2, vec![dx(2, 0), dx(2, 1)]).unwrap();
        let g = OperatorMatrix::from_entries(
            2,
            1,
            2,
            vec![dx(2, 1).scale(&-Coeff::one()), dx(2, 0)],
        )
        .unwrap();
        let cg = c.compose(&g).unwrap();
        assert_eq!((cg.rows(), cg.cols()), (1, 1));
        assert!(cg.is_zero());
    }

    #[test]
    fn identity_composition_leaves_operator_unchanged() {
        let b = parse_operator("[dx1, 2*dx2^2, 1; -dx1*dx2, 0, 3/4]", None).unwrap();
        let i = OperatorMatrix::identity(2, 2);
        assert_eq!(i.compose(&b).unwrap(), b);
        assert!(!i.is_zero());
    }

    #[test]
    fn mixed_partials_cancel() {
        let mut p = OperatorPoly::term(DiffMonomial::new(vec![1, 1]), Coeff::one());
        p.add_term(DiffMonomial::new(vec![1, 1]), -Coeff::one());
        assert!(p.is_zero());
        let m = OperatorMatrix::from_entries(1, 1, 2, vec![p]).unwrap();
        assert!(m.is_zero());
        // xy - yx written as a product
        let a = dx(2, 0).mul(&dx(2, 1));
        let b = dx(2, 1).mul(&dx(2, 0));
        assert!(a.add(&b.scale(&-Coeff::one())).is_zero());
    }

    #[test]
    fn compose_rejects_mismatched_shapes() {
        let a = OperatorMatrix::identity(2, 2);
        let b = OperatorMatrix::identity(3, 2);
        assert!(matches!(a.compose(&b), Err(Error::Shape(_))));
        let c = OperatorMatrix::identity(2, 3);
        assert!(matches!(a.compose(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn from_entries_checks_monomial_length() {
        let p = dx(3, 0);
        assert!(OperatorMatrix::from_entries(1, 1, 2, vec![p]).is_err());
    }

    #[test]
    fn rescale_scales_by_order() {
        let a = parse_operator("[1 + dx1 + dx1*dx2]", None).unwrap();
        let r = a.rescale_inputs(&ratio(2, 1)).unwrap();
        assert_eq!(r, parse_operator("[1 + 1/2*dx1 + 1/4*dx1*dx2]", None).unwrap());
    }
}
