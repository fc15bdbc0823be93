//! Predictors built from a potential network: the constrained model `f = G[g]`
//! (optionally plus a learned affine tail) and the unconstrained baseline.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::batch::{self, BatchJets};
use crate::autodiff::{Jet2, JetField};
use crate::diffops::{DiffMonomial, FloatOperator, OperatorMatrix, TransformedField};
use crate::error::{Error, Result};
use crate::network::{Mlp, MlpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Constrained,
    Standard,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Constrained => "constrained",
            Family::Standard => "standard",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constrained" => Ok(Family::Constrained),
            "standard" => Ok(Family::Standard),
            _ => Err(Error::Config(format!("unknown model family {s:?}"))),
        }
    }
}

/// One basis field of the tail: adds `c · x_input` to output `component`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineTerm {
    pub component: usize,
    pub input: usize,
}

/// `Σ_t c_t b_t(x)` with fixed linear basis fields `b_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTail {
    pub terms: Vec<AffineTerm>,
    pub coeffs: Vec<f64>,
}

impl AffineTail {
    /// `c_k x_k` on each of the first `min(D, K)` components, coefficients zero.
    pub fn diagonal(input_dim: usize, output_dim: usize) -> Self {
        let terms: Vec<AffineTerm> = (0..input_dim.min(output_dim))
            .map(|k| AffineTerm {
                component: k,
                input: k,
            })
            .collect();
        let coeffs = vec![0.0; terms.len()];
        AffineTail { terms, coeffs }
    }

    pub fn new(terms: Vec<AffineTerm>, coeffs: Vec<f64>) -> Result<Self> {
        if terms.len() != coeffs.len() {
            return Err(Error::shape(format!(
                "{} affine terms with {} coefficients",
                terms.len(),
                coeffs.len()
            )));
        }
        Ok(AffineTail { terms, coeffs })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Jets of the tail at `x`.
    pub fn jets(&self, x: &[f64], output_dim: usize, order: usize) -> Vec<Jet2> {
        let d = x.len();
        let mut out = vec![Jet2::constant(0.0, d, order); output_dim];
        for (t, &c) in self.terms.iter().zip(&self.coeffs) {
            let mut v = Jet2::variable(x[t.input], t.input, d, order);
            v = v.scale(c);
            out[t.component] = out[t.component].add(&v);
        }
        out
    }

    /// `op[b_t]` at every row of `xs`, one `B × rows` block per term.
    fn basis_under(&self, op: &FloatOperator, xs: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let d = xs.ncols();
        self.terms
            .iter()
            .map(|t| {
                let mut out = Array2::zeros((xs.nrows(), op.rows()));
                for i in 0..op.rows() {
                    for (m, c) in op.entry(i, t.component) {
                        if m.degree() == 0 {
                            out.column_mut(i).scaled_add(*c, &xs.column(t.input));
                        } else if *m == DiffMonomial::partial(d, t.input) {
                            out.column_mut(i).mapv_inplace(|v| v + c);
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// `op[tail]` at every row of `xs`.
    pub fn apply(&self, op: &FloatOperator, xs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((xs.nrows(), op.rows()));
        for (b, &c) in self.basis_under(op, xs).iter().zip(&self.coeffs) {
            out.scaled_add(c, b);
        }
        out
    }

    /// `∂L/∂c_t` given `∂L/∂op[tail]`.
    pub fn adjoint(&self, op: &FloatOperator, xs: ArrayView2<f64>, out_adj: ArrayView2<f64>) -> Vec<f64> {
        self.basis_under(op, xs)
            .iter()
            .map(|b| (b * &out_adj).sum())
            .collect()
    }
}

/// Common interface of the constrained and standard predictors.
///
/// Every model is `H[g] + tail` for a potential network `g`, a head operator
/// `H` (the transform, or the identity for the baseline) and an optional tail.
pub trait FieldModel: Send + Sync {
    fn family(&self) -> Family;
    fn potential(&self) -> &Mlp;
    fn potential_mut(&mut self) -> &mut Mlp;
    fn transform(&self) -> &OperatorMatrix;
    fn affine_tail(&self) -> Option<&AffineTail>;
    fn affine_tail_mut(&mut self) -> Option<&mut AffineTail>;

    fn input_dim(&self) -> usize {
        self.transform().input_dim()
    }

    fn output_dim(&self) -> usize {
        self.transform().rows()
    }

    /// Potential parameters followed by tail coefficients.
    fn param_count(&self) -> usize {
        self.potential().params.len() + self.affine_tail().map_or(0, |t| t.len())
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.potential().params.0.clone();
        if let Some(t) = self.affine_tail() {
            p.extend_from_slice(&t.coeffs);
        }
        p
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(format!(
                "{} values for a model with {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let n = self.potential().params.len();
        self.potential_mut().params.0.copy_from_slice(&values[..n]);
        if let Some(t) = self.affine_tail_mut() {
            t.coeffs.copy_from_slice(&values[n..]);
        }
        Ok(())
    }

    /// `true` for parameters subject to weight decay.
    fn weight_mask(&self) -> Vec<bool> {
        let mut m = self.potential().weight_mask();
        m.resize(self.param_count(), false);
        m
    }

    fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "point of dimension {} for a model over {} inputs",
                x.len(),
                self.input_dim()
            )));
        }
        let jets = ModelField::new(self).jets(x, 0)?;
        Ok(jets.iter().map(|j| j.value).collect())
    }

    /// Predictions at every row of `xs`.
    fn predict_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let head = self.transform().to_float();
        let jets = batch::forward(self.potential(), xs, head.order(), None)?;
        let mut out = batch::apply_operator(&head, &jets)?;
        if let Some(t) = self.affine_tail() {
            out += &t.apply(&identity_float(self.output_dim(), self.input_dim()), xs);
        }
        Ok(out)
    }

    /// `C[f](x)` from nested jets of the prediction.
    fn constraint_residual(&self, c: &OperatorMatrix, x: &[f64]) -> Result<Vec<f64>> {
        c.apply(&ModelField::new(self), x)
    }

    /// `C[f]` at every row of `xs`, differentiating the prediction numerically
    /// term by term (no symbolic cancellation).
    fn constraint_residual_batch(&self, c: &OperatorMatrix, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_constraint(c, self.output_dim(), self.input_dim())?;
        let (cf, head) = (c.to_float(), self.transform().to_float());
        let jets = batch::forward(self.potential(), xs, cf.order() + head.order(), None)?;
        let mut out = apply_nested(&cf, &head, &jets)?;
        if let Some(t) = self.affine_tail() {
            out += &t.apply(&cf, xs);
        }
        Ok(out)
    }

    /// Whether `C ∘ H` vanishes symbolically.
    fn satisfies_exactly(&self, c: &OperatorMatrix) -> Result<bool> {
        Ok(c.compose(self.transform())?.is_zero())
    }
}

fn check_constraint(c: &OperatorMatrix, output_dim: usize, input_dim: usize) -> Result<()> {
    if c.cols() != output_dim || c.input_dim() != input_dim {
        return Err(Error::shape(format!(
            "constraint with {} columns over {} inputs for a field R^{input_dim} -> R^{output_dim}",
            c.cols(),
            c.input_dim()
        )));
    }
    Ok(())
}

pub(crate) fn identity_float(n: usize, input_dim: usize) -> FloatOperator {
    OperatorMatrix::identity(n, input_dim).to_float()
}

/// `(C H)[g]` evaluated as `Σ c_α c'_β ∂^{α+β} g` without combining terms.
pub fn apply_nested(c: &FloatOperator, h: &FloatOperator, jets: &BatchJets) -> Result<Array2<f64>> {
    if c.cols() != h.rows() || jets.data.ncols() != h.cols() {
        return Err(Error::shape("operator chain does not match the field"));
    }
    let mut out = Array2::zeros((jets.batch, c.rows()));
    for i in 0..c.rows() {
        for k in 0..c.cols() {
            for (ma, ca) in c.entry(i, k) {
                for j in 0..h.cols() {
                    for (mb, cb) in h.entry(k, j) {
                        let plane = jets.plane(jets.layout.component(&ma.mul(mb))?);
                        out.column_mut(i).scaled_add(ca * cb, &plane.column(j));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The prediction of a model as a [`JetField`].
pub struct ModelField<'a, M: ?Sized> {
    model: &'a M,
}

impl<'a, M: FieldModel + ?Sized> ModelField<'a, M> {
    pub fn new(model: &'a M) -> Self {
        ModelField { model }
    }
}

impl<M: FieldModel + ?Sized> JetField for ModelField<'_, M> {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.model.output_dim()
    }
    fn max_order(&self) -> usize {
        let net: &dyn JetField = self.model.potential();
        net.max_order().saturating_sub(self.model.transform().max_derivative_order())
    }
    fn jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet2>> {
        let head = TransformedField::new(self.model.transform(), self.model.potential())?;
        let mut out = head.jets(x, order)?;
        if let Some(t) = self.model.affine_tail() {
            for (o, tj) in out.iter_mut().zip(t.jets(x, self.output_dim(), order)) {
                *o = o.add(&tj);
            }
        }
        Ok(out)
    }
}

/// `f = G[g] (+ Σ c_t b_t)`.
#[derive(Clone, Debug)]
pub struct ConstrainedModel {
    pub potential: Mlp,
    transform: OperatorMatrix,
    pub affine_tail: Option<AffineTail>,
}

impl ConstrainedModel {
    pub fn new(potential: Mlp, transform: OperatorMatrix, affine_tail: Option<AffineTail>) -> Result<Self> {
        if potential.spec.output_dim() != transform.cols() {
            return Err(Error::shape(format!(
                "potential has {} outputs, transform expects {}",
                potential.spec.output_dim(),
                transform.cols()
            )));
        }
        if potential.spec.input_dim() != transform.input_dim() {
            return Err(Error::shape("potential and transform input dimensions differ"));
        }
        potential
            .spec
            .validate_for_operator(&transform)
            .map_err(|r| Error::Config(r.0))?;
        if let Some(t) = &affine_tail {
            let bad = t
                .terms
                .iter()
                .any(|a| a.component >= transform.rows() || a.input >= transform.input_dim());
            if bad {
                return Err(Error::shape("affine term outside the field dimensions"));
            }
        }
        Ok(ConstrainedModel {
            potential,
            transform,
            affine_tail,
        })
    }

    /// Network `D → hidden… → G.cols` initialised from `seed`.
    pub fn init(spec: MlpSpec, transform: OperatorMatrix, affine_tail: Option<AffineTail>, seed: u64) -> Result<Self> {
        Self::new(Mlp::init(spec, seed), transform, affine_tail)
    }
}

impl FieldModel for ConstrainedModel {
    fn family(&self) -> Family {
        Family::Constrained
    }
    fn potential(&self) -> &Mlp {
        &self.potential
    }
    fn potential_mut(&mut self) -> &mut Mlp {
        &mut self.potential
    }
    fn transform(&self) -> &OperatorMatrix {
        &self.transform
    }
    fn affine_tail(&self) -> Option<&AffineTail> {
        self.affine_tail.as_ref()
    }
    fn affine_tail_mut(&mut self) -> Option<&mut AffineTail> {
        self.affine_tail.as_mut()
    }
}

/// A plain network predicting the field directly.
#[derive(Clone, Debug)]
pub struct StandardModel {
    pub net: Mlp,
    head: OperatorMatrix,
}

impl StandardModel {
    pub fn new(net: Mlp) -> Self {
        let head = OperatorMatrix::identity(net.spec.output_dim(), net.spec.input_dim());
        StandardModel { net, head }
    }

    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        Self::new(Mlp::init(spec, seed))
    }
}

impl FieldModel for StandardModel {
    fn family(&self) -> Family {
        Family::Standard
    }
    fn potential(&self) -> &Mlp {
        &self.net
    }
    fn potential_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
    fn transform(&self) -> &OperatorMatrix {
        &self.head
    }
    fn affine_tail(&self) -> Option<&AffineTail> {
        None
    }
    fn affine_tail_mut(&mut self) -> Option<&mut AffineTail> {
        None
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    family: Family,
    spec: MlpSpec,
    input_dim: usize,
    transform: String,
    affine_tail: Option<AffineTail>,
    seed: u64,
}

/// Write `<stem>.model.json` plus the parameter blob `<stem>.bin`/`<stem>.json`.
pub fn save_model(model: &dyn FieldModel, stem: &Path, seed: u64) -> Result<()> {
    let manifest = Manifest {
        family: model.family(),
        spec: model.potential().spec.clone(),
        input_dim: model.input_dim(),
        transform: model.transform().to_string(),
        affine_tail: model.affine_tail().cloned(),
        seed,
    };
    fs::write(stem.with_extension("model.json"), serde_json::to_vec_pretty(&manifest)?)?;
    model.potential().save(stem, seed)
}

pub fn load_model(stem: &Path) -> Result<Box<dyn FieldModel>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(stem.with_extension("model.json"))?)?;
    let (net, _) = Mlp::load(stem)?;
    if net.spec != manifest.spec {
        return Err(Error::Config("parameter header disagrees with the model manifest".into()));
    }
    Ok(match manifest.family {
        Family::Standard => Box::new(StandardModel::new(net)),
        Family::Constrained => {
            let g = crate::diffops::parse_operator(&manifest.transform, Some(manifest.input_dim))?;
            Box::new(ConstrainedModel::new(net, g, manifest.affine_tail)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::FnField;
    use crate::diffops::{airy_strain, curl_constraint3d, div, equilibrium_constraint, grad, ratio, rot_grad2d};
    use crate::network::{Activation, ParamVector};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tanh_spec(d: usize, out: usize) -> MlpSpec {
        MlpSpec::with_hidden(d, &[8, 6], out, Activation::Tanh).unwrap()
    }

    fn random_points(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn constant_potential_gives_zero_field() {
        let spec = tanh_spec(2, 1);
        let mut p = vec![0.0; spec.param_count()];
        *p.last_mut().unwrap() = 3.7;
        let net = Mlp::new(spec, ParamVector(p)).unwrap();
        let m = ConstrainedModel::new(net, rot_grad2d(), None).unwrap();
        assert_eq!(m.predict(&[1.3, 0.4]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn polynomial_potential_through_rot_grad() {
        let g = FnField::new(2, 1, |x: &[Jet2]| vec![x[0].mul(&x[0]).mul(&x[1])]);
        let f = TransformedField::new(&rot_grad2d(), &g).unwrap();
        let x = [1.5, -0.5];
        let v: Vec<f64> = f.jets(&x, 0).unwrap().iter().map(|j| j.value).collect();
        assert!((v[0] - 2.25).abs() < 1e-14 && (v[1] - 1.5).abs() < 1e-14);
    }

    fn zero_potential_affine(c0: f64, c1: f64) -> ConstrainedModel {
        let spec = tanh_spec(2, 1);
        let net = Mlp::new(spec.clone(), ParamVector(vec![0.0; spec.param_count()])).unwrap();
        let mut tail = AffineTail::diagonal(2, 2);
        tail.coeffs = vec![c0, c1];
        ConstrainedModel::new(net, rot_grad2d(), Some(tail)).unwrap()
    }

    #[test]
    fn affine_tail_prediction_and_divergence() {
        let m = zero_potential_affine(1.1, -0.3);
        let x = [2.0, 3.0];
        let p = m.predict(&x).unwrap();
        assert!((p[0] - 2.2).abs() < 1e-15 && (p[1] + 0.9).abs() < 1e-15);
        let r = m.constraint_residual(&div(2), &x).unwrap();
        assert!((r[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn prediction_is_linear_in_tail() {
        let mut m = zero_potential_affine(0.0, 0.0);
        m.potential = Mlp::init(tanh_spec(2, 1), 4);
        let x = [0.7, 1.9];
        let base = m.predict(&x).unwrap();
        m.affine_tail.as_mut().unwrap().coeffs = vec![1.0, 0.0];
        let e0 = m.predict(&x).unwrap();
        m.affine_tail.as_mut().unwrap().coeffs = vec![2.5, -1.5];
        let mixed = m.predict(&x).unwrap();
        let expect = [base[0] + 2.5 * (e0[0] - base[0]), base[1] - 1.5 * x[1]];
        assert!((mixed[0] - expect[0]).abs() < 1e-12 && (mixed[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn random_constrained_models_satisfy_constraints() {
        let cases: Vec<(OperatorMatrix, OperatorMatrix, usize, usize)> = vec![
            (div(2), rot_grad2d(), 2, 1),
            (curl_constraint3d(), grad(3), 3, 1),
        ];
        for (c, g, d, k) in cases {
            for seed in 0..5 {
                let m = ConstrainedModel::init(tanh_spec(d, k), g.clone(), None, seed).unwrap();
                let xs = random_points(50, d, 0.0, 4.0, seed);
                for x in xs.rows() {
                    let r = m.constraint_residual(&c, x.as_slice().unwrap()).unwrap();
                    assert!(r.iter().all(|v| v.abs() < 1e-8), "{r:?}");
                }
                let rb = m.constraint_residual_batch(&c, xs.view()).unwrap();
                assert!(rb.iter().all(|v| v.abs() < 1e-8));
            }
        }
    }

    #[test]
    fn standard_model_violates_divergence() {
        let m = StandardModel::init(tanh_spec(2, 2), 1);
        let r = m.constraint_residual(&div(2), &[0.3, 0.9]).unwrap();
        assert!(r[0].abs() > 1e-3);
        assert!(!m.satisfies_exactly(&div(2)).unwrap());
    }

    #[test]
    fn batch_routes_agree_with_pointwise() {
        let m = StandardModel::init(tanh_spec(2, 2), 8);
        let xs = random_points(20, 2, -1.0, 1.0, 3);
        let pb = m.predict_batch(xs.view()).unwrap();
        let rb = m.constraint_residual_batch(&div(2), xs.view()).unwrap();
        for (i, x) in xs.rows().into_iter().enumerate() {
            let x = x.as_slice().unwrap();
            let p = m.predict(x).unwrap();
            let r = m.constraint_residual(&div(2), x).unwrap();
            assert!((p[0] - pb[[i, 0]]).abs() < 1e-12 && (p[1] - pb[[i, 1]]).abs() < 1e-12);
            assert!((r[0] - rb[[i, 0]]).abs() < 1e-12);
        }
        let mut a = zero_potential_affine(0.4, 0.1);
        a.potential = Mlp::init(tanh_spec(2, 1), 2);
        let pb = a.predict_batch(xs.view()).unwrap();
        let p = a.predict(xs.row(5).as_slice().unwrap()).unwrap();
        assert!((p[1] - pb[[5, 1]]).abs() < 1e-12);
        let rb = a.constraint_residual_batch(&div(2), xs.view()).unwrap();
        assert!(rb.iter().all(|v| (v - 0.5).abs() < 1e-10));
    }

    #[test]
    fn strain_residual_needs_third_order() {
        let nu = ratio(7, 25);
        let m = ConstrainedModel::init(tanh_spec(2, 1), airy_strain(&nu), None, 0).unwrap();
        let c = equilibrium_constraint(&nu);
        assert!(matches!(
            m.constraint_residual(&c, &[0.1, 0.2]),
            Err(Error::Capability { requested: 3, .. })
        ));
        assert!(m.satisfies_exactly(&c).unwrap());
        assert_eq!(m.predict_batch(array![[0.1, 0.2]].view()).unwrap().ncols(), 3);
    }

    #[test]
    fn relu_potential_rejected() {
        let spec = MlpSpec::with_hidden(2, &[4], 1, Activation::Relu).unwrap();
        assert!(matches!(
            ConstrainedModel::init(spec, rot_grad2d(), None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let mut m = zero_potential_affine(0.25, 0.5);
        m.potential = Mlp::init(tanh_spec(2, 1), 6);
        save_model(&m, &stem, 6).unwrap();
        let back = load_model(&stem).unwrap();
        assert_eq!(back.family(), Family::Constrained);
        assert_eq!(back.params(), m.params());
        assert_eq!(back.predict(&[0.4, 0.1]).unwrap(), m.predict(&[0.4, 0.1]).unwrap());
        let s = StandardModel::init(tanh_spec(2, 2), 1);
        save_model(&s, &stem, 1).unwrap();
        assert_eq!(load_model(&stem).unwrap().params(), s.params());
    }
}
