//! Construct a transform `G` with `C·G ≡ 0` from an ansatz `G = Γξ`.
//!
//! `ξ` is a list of candidate derivative monomials. Expanding `C·Γξ` and
//! asking every resulting monomial coefficient to vanish gives a homogeneous
//! linear system in the entries of `Γ`; its rational nullspace yields `G`.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

use crate::diffops::{Coeff, DiffMonomial, OperatorMatrix, OperatorPoly};

/// Candidate monomials `ξ` for every entry of one column of `G`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnsatzBasis {
    pub monomials: Vec<DiffMonomial>,
    pub potential_dim: usize,
    pub max_degree: usize,
}

impl AnsatzBasis {
    /// Every monomial over `input_dim` variables of total degree `<= max_degree`.
    pub fn complete(input_dim: usize, max_degree: usize, potential_dim: usize) -> Self {
        let mut monomials = Vec::new();
        let mut idx = vec![0u32; input_dim];
        enumerate(&mut idx, 0, max_degree as u32, &mut monomials);
        monomials.sort();
        AnsatzBasis {
            monomials,
            potential_dim,
            max_degree,
        }
    }

    /// A user-chosen `ξ`; sorted and deduplicated.
    pub fn custom(mut monomials: Vec<DiffMonomial>, potential_dim: usize) -> Self {
        monomials.sort();
        monomials.dedup();
        let max_degree = monomials.iter().map(DiffMonomial::degree).max().unwrap_or(0);
        AnsatzBasis {
            monomials,
            potential_dim,
            max_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }
}

fn enumerate(idx: &mut Vec<u32>, axis: usize, budget: u32, out: &mut Vec<DiffMonomial>) {
    if axis == idx.len() {
        out.push(DiffMonomial::new(idx.clone()));
        return;
    }
    for k in 0..=budget {
        idx[axis] = k;
        enumerate(idx, axis + 1, budget - k, out);
    }
    idx[axis] = 0;
}

pub fn build_basis(input_dim: usize, max_degree: usize, potential_dim: usize) -> AnsatzBasis {
    AnsatzBasis::complete(input_dim, max_degree, potential_dim)
}

/// Unknown `γ` for entry `row` of a `G` column and monomial `ξ_m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unknown {
    pub row: usize,
    pub monomial: DiffMonomial,
}

/// Homogeneous system `M γ = 0`.
///
/// Row `k` is the coefficient of monomial `equations[k].1` in output row
/// `equations[k].0` of `C·Γξ`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoefficientSystem {
    pub matrix: Vec<Vec<Coeff>>,
    pub unknowns: Vec<Unknown>,
    pub equations: Vec<(usize, DiffMonomial)>,
}

impl CoefficientSystem {
    pub fn n_unknowns(&self) -> usize {
        self.unknowns.len()
    }
}

pub fn coefficient_system(c: &OperatorMatrix, basis: &AnsatzBasis) -> CoefficientSystem {
    let unknowns: Vec<Unknown> = (0..c.cols())
        .flat_map(|row| {
            basis.monomials.iter().map(move |m| Unknown {
                row,
                monomial: m.clone(),
            })
        })
        .collect();
    let n = unknowns.len();
    let mut equations = Vec::new();
    let mut matrix = Vec::new();
    for i in 0..c.rows() {
        // coefficient of each result monomial, per unknown
        let mut rows: std::collections::BTreeMap<DiffMonomial, Vec<Coeff>> = Default::default();
        for (u, unk) in unknowns.iter().enumerate() {
            let xi = OperatorPoly::term(unk.monomial.clone(), Coeff::one());
            let product = c.entry(i, unk.row).mul(&xi);
            for (m, coeff) in product.terms() {
                rows.entry(m.clone())
                    .or_insert_with(|| vec![Coeff::zero(); n])[u] += coeff;
            }
        }
        for (m, row) in rows {
            if row.iter().any(|v| !v.is_zero()) {
                equations.push((i, m));
                matrix.push(row);
            }
        }
    }
    CoefficientSystem {
        matrix,
        unknowns,
        equations,
    }
}

/// Basis of `{γ : Mγ = 0}` by fraction-free (Bareiss) elimination.
///
/// One vector per free column, in column order, with that free unknown set
/// to 1 and the other free unknowns 0.
pub fn rational_nullspace(system: &CoefficientSystem) -> Vec<Vec<Coeff>> {
    nullspace(&system.matrix, system.n_unknowns())
}

pub fn nullspace(matrix: &[Vec<Coeff>], n_cols: usize) -> Vec<Vec<Coeff>> {
    // clear denominators row by row
    let mut m: Vec<Vec<BigInt>> = matrix
        .iter()
        .map(|row| {
            let lcm = row
                .iter()
                .fold(BigInt::one(), |acc, v| acc.lcm(v.denom()));
            row.iter()
                .map(|v| v.numer() * (&lcm / v.denom()))
                .collect()
        })
        .collect();
    let n_rows = m.len();
    let mut pivots = Vec::new();
    let mut prev = BigInt::one();
    let mut r = 0;
    for col in 0..n_cols {
        if r == n_rows {
            break;
        }
        let Some(p) = (r..n_rows).find(|&i| !m[i][col].is_zero()) else {
            continue;
        };
        m.swap(r, p);
        for i in r + 1..n_rows {
            for j in col + 1..n_cols {
                let v = &m[r][col] * &m[i][j] - &m[i][col] * &m[r][j];
                debug_assert!((&v % &prev).is_zero());
                m[i][j] = v / &prev;
            }
            m[i][col] = BigInt::zero();
        }
        prev = m[r][col].clone();
        pivots.push(col);
        r += 1;
    }

    let mut is_pivot = vec![false; n_cols];
    for &p in &pivots {
        is_pivot[p] = true;
    }
    (0..n_cols)
        .filter(|&f| !is_pivot[f])
        .map(|free| {
            let mut v = vec![Coeff::zero(); n_cols];
            v[free] = Coeff::one();
            for (row, &pc) in pivots.iter().enumerate().rev() {
                let mut acc = Coeff::zero();
                for j in pc + 1..n_cols {
                    if !m[row][j].is_zero() && !v[j].is_zero() {
                        acc += Coeff::from(m[row][j].clone()) * &v[j];
                    }
                }
                v[pc] = -acc / Coeff::from(m[row][pc].clone());
            }
            v
        })
        .collect()
}

/// One attempt at a `G` whose columns each lie in the ansatz nullspace.
///
/// Uses the complete basis of degree `max_degree` and the first
/// `potential_dim` nullspace vectors; each column is scaled so its first
/// nonzero coefficient is `+1`. `None` when the nullspace is too small.
pub fn find_transformation(
    c: &OperatorMatrix,
    max_degree: usize,
    potential_dim: usize,
) -> Option<OperatorMatrix> {
    let basis = AnsatzBasis::complete(c.input_dim(), max_degree, potential_dim);
    find_transformation_in(c, &basis)
}

pub fn find_transformation_in(c: &OperatorMatrix, basis: &AnsatzBasis) -> Option<OperatorMatrix> {
    if basis.potential_dim == 0 {
        return None;
    }
    let system = coefficient_system(c, basis);
    let null = rational_nullspace(&system);
    if null.len() < basis.potential_dim {
        return None;
    }
    let rows = c.cols();
    let mut g = OperatorMatrix::zeros(rows, basis.potential_dim, c.input_dim());
    for (k, v) in null.iter().take(basis.potential_dim).enumerate() {
        let mut column: Vec<OperatorPoly> = vec![OperatorPoly::zero(); rows];
        for (coeff, unk) in v.iter().zip(&system.unknowns) {
            column[unk.row].add_term(unk.monomial.clone(), coeff.clone());
        }
        let lead = column
            .iter()
            .find_map(|p| p.terms().next().map(|(_, c)| c.clone()))
            .expect("nonzero nullspace vector");
        let inv = lead.recip();
        for (r, p) in column.into_iter().enumerate() {
            *g.entry_mut(r, k) = p.scale(&inv);
        }
    }
    debug_assert!(c.compose(&g).map(|z| z.is_zero()).unwrap_or(false));
    Some(g)
}

/// Try degrees `0..=max_degree` in turn and return the first transform found.
pub fn search_transformation(
    c: &OperatorMatrix,
    max_degree: usize,
    potential_dim: usize,
) -> Option<(usize, OperatorMatrix)> {
    (0..=max_degree).find_map(|d| find_transformation(c, d, potential_dim).map(|g| (d, g)))
}

/// Normalise a vector to a primitive integer vector with positive leading entry.
pub fn primitive(v: &[Coeff]) -> Vec<BigInt> {
    let lcm = v.iter().fold(BigInt::one(), |acc, x| acc.lcm(x.denom()));
    let ints: Vec<BigInt> = v.iter().map(|x| x.numer() * (&lcm / x.denom())).collect();
    let g = ints.iter().fold(BigInt::zero(), |acc, x| acc.gcd(x));
    if g.is_zero() {
        return ints;
    }
    let sign = ints
        .iter()
        .find(|x| !x.is_zero())
        .map(|x| if x.is_negative() { -BigInt::one() } else { BigInt::one() })
        .unwrap();
    ints.into_iter().map(|x| x / &g * &sign).collect()
}
