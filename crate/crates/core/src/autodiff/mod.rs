//! Input derivatives of networks (truncated second-order jets) and parameter
//! gradients (reverse mode over those jets).
//!
//! Two engines live here. [`eval_jet`] and the scalar [`Tape`] work one point
//! at a time on any [`Scalar`]; they are simple and serve as the reference.
//! [`batch`] runs the same jets for a whole minibatch as stacked matrices and
//! records a layer-level tape for the backward pass; training uses it.

pub mod batch;
mod jet;
mod scalar;
mod tape;

pub use jet::{packed_index, Jet2};
pub use scalar::Scalar;
pub use tape::{loss_gradient, Tape, Var};

use crate::error::{Error, Result};
use crate::network::{Activation, Mlp, MlpSpec};

/// Highest input-derivative order any jet carries.
pub const MAX_ORDER: usize = 2;

/// A function `R^D → R^K` that can report its jets at a point.
pub trait JetField {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Highest derivative order [`JetField::jets`] can deliver.
    fn max_order(&self) -> usize;
    fn jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet2>>;
}

fn check_order(requested: usize, supported: usize) -> Result<()> {
    if requested > supported {
        Err(Error::Capability {
            requested,
            supported,
        })
    } else {
        Ok(())
    }
}

/// Network outputs and their input derivatives up to `order` at `x`.
pub fn eval_jet(net: &Mlp, x: &[f64], order: usize) -> Result<Vec<Jet2>> {
    check_order(order, MAX_ORDER.min(net.spec.max_jet_order()))?;
    if x.len() != net.spec.input_dim() {
        return Err(Error::shape(format!(
            "input of length {} for a network over {} inputs",
            x.len(),
            net.spec.input_dim()
        )));
    }
    Ok(eval_jet_with(&net.spec, net.params.as_slice(), x, order))
}

/// [`eval_jet`] over an arbitrary scalar type, e.g. taped [`Var`]s.
///
/// Shapes and order are the caller's responsibility.
pub fn eval_jet_with<S: Scalar>(
    spec: &MlpSpec,
    params: &[S],
    x: &[f64],
    order: usize,
) -> Vec<Jet2<S>> {
    let dim = x.len();
    let mut z: Vec<Jet2<S>> = x
        .iter()
        .enumerate()
        .map(|(k, &v)| Jet2::variable(S::from_f64(v), k, dim, order))
        .collect();
    for block in spec.layout() {
        let w = &params[block.weights.clone()];
        let b = &params[block.bias.clone()];
        z = (0..block.fan_out)
            .map(|o| {
                let pre = Jet2::affine(&w[o * block.fan_in..(o + 1) * block.fan_in], &z, b[o]);
                activate(block.activation, &pre)
            })
            .collect();
    }
    z
}

fn activate<S: Scalar>(act: Activation, pre: &Jet2<S>) -> Jet2<S> {
    match act {
        Activation::Identity => pre.clone(),
        Activation::Tanh => pre.tanh(),
        Activation::Sin => pre.sin(),
        Activation::Sigmoid => {
            let half = S::from_f64(0.5);
            let one = S::from_f64(1.0);
            let s = half * (one + pre.value.scale(0.5).tanh());
            let d1 = s * (one - s);
            pre.map(s, d1, d1 * (one - S::from_f64(2.0) * s))
        }
        Activation::Relu => {
            let step = if pre.value.value() > 0.0 { 1.0 } else { 0.0 };
            pre.map(pre.value.relu(), S::from_f64(step), S::from_f64(0.0))
        }
    }
}

impl JetField for Mlp {
    fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }
    fn max_order(&self) -> usize {
        MAX_ORDER.min(self.spec.max_jet_order())
    }
    fn jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet2>> {
        eval_jet(self, x, order)
    }
}

/// A field given by a closure over coordinate jets, e.g. a closed-form
/// polynomial used as a test potential.
pub struct FnField<F> {
    input_dim: usize,
    output_dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[Jet2]) -> Vec<Jet2>,
{
    pub fn new(input_dim: usize, output_dim: usize, f: F) -> Self {
        FnField {
            input_dim,
            output_dim,
            f,
        }
    }
}

impl<F> JetField for FnField<F>
where
    F: Fn(&[Jet2]) -> Vec<Jet2>,
{
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn max_order(&self) -> usize {
        MAX_ORDER
    }
    fn jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet2>> {
        check_order(order, MAX_ORDER)?;
        let vars: Vec<Jet2> = x
            .iter()
            .enumerate()
            .map(|(k, &v)| Jet2::variable(v, k, x.len(), order))
            .collect();
        Ok((self.f)(&vars))
    }
}
