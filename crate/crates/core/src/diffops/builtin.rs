use num_traits::One;

use super::{dsl, Coeff, DiffMonomial, OperatorMatrix, OperatorPoly};

fn d(dim: usize, axis: usize) -> OperatorPoly {
    OperatorPoly::term(DiffMonomial::partial(dim, axis), Coeff::one())
}

fn d2(dim: usize, a: usize, b: usize) -> OperatorPoly {
    d(dim, a).mul(&d(dim, b))
}

fn neg(p: OperatorPoly) -> OperatorPoly {
    p.scale(&-Coeff::one())
}

fn build(rows: usize, cols: usize, dim: usize, entries: Vec<OperatorPoly>) -> OperatorMatrix {
    OperatorMatrix::from_entries(rows, cols, dim, entries).expect("built-in operator shape")
}

/// Exact rational for a decimal Poisson ratio, e.g. `0.28 → 7/25`.
///
/// Uses the shortest decimal that round-trips the float.
pub fn poisson_ratio(nu: f64) -> Coeff {
    dsl::parse_decimal(&format!("{nu}")).expect("finite Poisson ratio")
}

/// `∇` as a `D×1` operator: the curl-free transform of a scalar potential.
pub fn grad(dim: usize) -> OperatorMatrix {
    build(dim, 1, dim, (0..dim).map(|k| d(dim, k)).collect())
}

/// `∇·` as a `1×D` operator.
pub fn div(dim: usize) -> OperatorMatrix {
    build(1, dim, dim, (0..dim).map(|k| d(dim, k)).collect())
}

/// `∇×` on 3-vector fields: the divergence-free transform of a vector potential.
pub fn curl3d() -> OperatorMatrix {
    let z = OperatorPoly::zero;
    build(
        3,
        3,
        3,
        vec![
            z(),
            neg(d(3, 2)),
            d(3, 1),
            d(3, 2),
            z(),
            neg(d(3, 0)),
            neg(d(3, 1)),
            d(3, 0),
            z(),
        ],
    )
}

/// The curl-free constraint `∇×f = 0`; same matrix as [`curl3d`].
pub fn curl_constraint3d() -> OperatorMatrix {
    curl3d()
}

/// `[∂/∂x2; −∂/∂x1]`: divergence-free transform of a 2D scalar potential.
pub fn rot_grad2d() -> OperatorMatrix {
    build(2, 1, 2, vec![d(2, 1), neg(d(2, 0))])
}

/// Strain components `(ε_xx, ε_yy, ε_xy)` from an Airy stress function.
pub fn airy_strain(nu: &Coeff) -> OperatorMatrix {
    let one = Coeff::one();
    build(
        3,
        1,
        2,
        vec![
            d2(2, 1, 1).add(&d2(2, 0, 0).scale(&-nu)),
            d2(2, 0, 0).add(&d2(2, 1, 1).scale(&-nu)),
            d2(2, 0, 1).scale(&-(one + nu)),
        ],
    )
}

/// Plane-stress equilibrium written in strains:
/// `∂x(ε_xx + ν ε_yy) + (1−ν) ∂y ε_xy` and `∂y(ε_yy + ν ε_xx) + (1−ν) ∂x ε_xy`.
pub fn equilibrium_constraint(nu: &Coeff) -> OperatorMatrix {
    let shear = Coeff::one() - nu;
    build(
        2,
        3,
        2,
        vec![
            d(2, 0),
            d(2, 0).scale(nu),
            d(2, 1).scale(&shear),
            d(2, 1).scale(nu),
            d(2, 1),
            d(2, 0).scale(&shear),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::ratio;

    #[test]
    fn poisson_ratio_is_exact() {
        assert_eq!(poisson_ratio(0.28), ratio(7, 25));
    }

    #[test]
    fn builtin_pairs_annihilate() {
        let nu = ratio(7, 25);
        let pairs = [
            (div(2), rot_grad2d()),
            (div(3), curl3d()),
            (curl_constraint3d(), grad(3)),
            (equilibrium_constraint(&nu), airy_strain(&nu)),
        ];
        for (c, g) in pairs {
            assert!(c.compose(&g).unwrap().is_zero(), "{c} * {g}");
        }
    }

    #[test]
    fn curl_of_grad_is_zero() {
        let cg = curl3d().compose(&grad(3)).unwrap();
        assert_eq!((cg.rows(), cg.cols()), (3, 1));
        assert!(cg.is_zero());
    }

    #[test]
    fn orders() {
        assert_eq!(grad(3).max_derivative_order(), 1);
        assert_eq!(airy_strain(&ratio(7, 25)).max_derivative_order(), 2);
        assert_eq!(OperatorMatrix::identity(2, 2).max_derivative_order(), 0);
    }

    #[test]
    fn wrong_ratio_breaks_equilibrium() {
        let c = equilibrium_constraint(&ratio(1, 3));
        let g = airy_strain(&ratio(7, 25));
        assert!(!c.compose(&g).unwrap().is_zero());
    }
}
