//! Minibatch jets through a network, with a reverse pass over the layers.
//!
//! A batch of jets is stored as one matrix with `ncomp · B` rows: the value
//! plane first, then one plane per first derivative, then one per packed
//! second derivative. Derivative planes propagate through `W` exactly like
//! values (bias excluded), so every layer is a single matrix product followed
//! by an elementwise activation rule.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::{check_order, packed_index, MAX_ORDER};
use crate::diffops::{DiffMonomial, FloatOperator};
use crate::error::{Error, Result};
use crate::network::{Activation, Mlp};

/// Shape of stacked jets: derivative order and input dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JetLayout {
    pub order: usize,
    pub dim: usize,
}

impl JetLayout {
    pub fn ncomp(&self) -> usize {
        match self.order {
            0 => 1,
            1 => 1 + self.dim,
            _ => 1 + self.dim + self.dim * (self.dim + 1) / 2,
        }
    }

    /// Plane holding `∂^α`.
    pub fn component(&self, m: &DiffMonomial) -> Result<usize> {
        check_order(m.degree(), self.order)?;
        let axes = m.axes();
        Ok(match axes.as_slice() {
            [] => 0,
            [k] => 1 + k,
            [i, j] => 1 + self.dim + packed_index(self.dim, *i, *j),
            _ => unreachable!(),
        })
    }

    fn pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        if self.order >= 2 {
            for i in 0..self.dim {
                for j in i..self.dim {
                    out.push((i, j, 1 + self.dim + packed_index(self.dim, i, j)));
                }
            }
        }
        out
    }
}

/// Jets of a `B`-point batch, one column per unit.
#[derive(Clone, Debug)]
pub struct BatchJets {
    pub layout: JetLayout,
    pub batch: usize,
    pub data: Array2<f64>,
}

impl BatchJets {
    /// Seed jets of the coordinate functions at the rows of `xs`.
    pub fn inputs(xs: ArrayView2<f64>, order: usize) -> Self {
        let (batch, dim) = xs.dim();
        let layout = JetLayout { order, dim };
        let mut data = Array2::zeros((layout.ncomp() * batch, dim));
        data.slice_mut(s![0..batch, ..]).assign(&xs);
        if order >= 1 {
            for k in 0..dim {
                data.slice_mut(s![(1 + k) * batch..(2 + k) * batch, k]).fill(1.0);
            }
        }
        BatchJets {
            layout,
            batch,
            data,
        }
    }

    pub fn plane(&self, comp: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![comp * self.batch..(comp + 1) * self.batch, ..])
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.plane(0)
    }
}

/// Inputs and pre-activations of every layer, kept for the backward pass.
#[derive(Debug, Default)]
pub struct LayerTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    layout: Option<JetLayout>,
    batch: usize,
}

impl LayerTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.pre.clear();
        self.layout = None;
    }
}

fn weights<'a>(net: &'a Mlp, layer: usize) -> ArrayView2<'a, f64> {
    let block = &net.spec.layout()[layer];
    ArrayView2::from_shape(
        (block.fan_out, block.fan_in),
        &net.params.as_slice()[block.weights.clone()],
    )
    .expect("weight block shape")
}

/// Jets of the network outputs at every row of `xs`.
///
/// When `tape` is given it is cleared and refilled for [`backward`].
pub fn forward(
    net: &Mlp,
    xs: ArrayView2<f64>,
    order: usize,
    mut tape: Option<&mut LayerTape>,
) -> Result<BatchJets> {
    check_order(order, MAX_ORDER.min(net.spec.max_jet_order()))?;
    if xs.ncols() != net.spec.input_dim() {
        return Err(Error::shape(format!(
            "inputs have {} columns, network expects {}",
            xs.ncols(),
            net.spec.input_dim()
        )));
    }
    let input = BatchJets::inputs(xs, order);
    let (layout, batch) = (input.layout, input.batch);
    if let Some(t) = tape.as_deref_mut() {
        t.clear();
        t.layout = Some(layout);
        t.batch = batch;
    }
    let mut z = input.data;
    let params = net.params.as_slice();
    for (l, block) in net.spec.layout().iter().enumerate() {
        let mut a = z.dot(&weights(net, l).t());
        let bias = &params[block.bias.clone()];
        for mut row in a.slice_mut(s![0..batch, ..]).rows_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        let out = if block.activation == Activation::Identity {
            None
        } else {
            Some(activate(block.activation, layout, batch, &a))
        };
        match tape.as_deref_mut() {
            Some(t) => {
                t.inputs.push(z);
                z = out.unwrap_or_else(|| a.clone());
                t.pre.push(a);
            }
            None => z = out.unwrap_or(a),
        }
    }
    Ok(BatchJets {
        layout,
        batch,
        data: z,
    })
}

fn activate(act: Activation, layout: JetLayout, batch: usize, a: &Array2<f64>) -> Array2<f64> {
    let width = a.ncols();
    let plane = batch * width;
    let src = a.as_slice().expect("standard layout");
    let mut out = Array2::zeros(a.raw_dim());
    let dst = out.as_slice_mut().unwrap();
    let dim = layout.dim;
    let pairs = layout.pairs();
    for idx in 0..plane {
        let [f, d1, d2, _] = act.derivatives(src[idx]);
        dst[idx] = f;
        if layout.order >= 1 {
            for k in 0..dim {
                let p = (1 + k) * plane + idx;
                dst[p] = d1 * src[p];
            }
        }
        for &(i, j, c) in &pairs {
            let ai = src[(1 + i) * plane + idx];
            let aj = src[(1 + j) * plane + idx];
            let p = c * plane + idx;
            dst[p] = d2 * ai * aj + d1 * src[p];
        }
    }
    out
}

fn activate_adjoint(
    act: Activation,
    layout: JetLayout,
    batch: usize,
    a: &Array2<f64>,
    s_adj: &Array2<f64>,
) -> Array2<f64> {
    let width = a.ncols();
    let plane = batch * width;
    let src = a.as_slice().expect("standard layout");
    let sb = s_adj.as_slice().expect("standard layout");
    let mut out = Array2::zeros(a.raw_dim());
    let ab = out.as_slice_mut().unwrap();
    let dim = layout.dim;
    let pairs = layout.pairs();
    for idx in 0..plane {
        let [_, d1, d2, d3] = act.derivatives(src[idx]);
        let mut a0 = sb[idx] * d1;
        if layout.order >= 1 {
            for k in 0..dim {
                let p = (1 + k) * plane + idx;
                a0 += sb[p] * d2 * src[p];
                ab[p] = sb[p] * d1;
            }
        }
        for &(i, j, c) in &pairs {
            let p = c * plane + idx;
            let (pi, pj) = ((1 + i) * plane + idx, (1 + j) * plane + idx);
            let g = sb[p];
            a0 += g * (d3 * src[pi] * src[pj] + d2 * src[p]);
            ab[p] = g * d1;
            ab[pi] += g * d2 * src[pj];
            ab[pj] += g * d2 * src[pi];
        }
        ab[idx] = a0;
    }
    out
}

/// Accumulate `∂L/∂θ` into `grad` given `∂L/∂(output jets)` from the taped forward pass.
pub fn backward(net: &Mlp, tape: &LayerTape, out_adj: Array2<f64>, grad: &mut [f64]) {
    let layout = tape.layout.expect("backward without a taped forward pass");
    let batch = tape.batch;
    let blocks = net.spec.layout();
    let mut adj = out_adj;
    for l in (0..blocks.len()).rev() {
        let block = &blocks[l];
        let a_adj = if block.activation == Activation::Identity {
            adj
        } else {
            activate_adjoint(block.activation, layout, batch, &tape.pre[l], &adj)
        };
        let z = &tape.inputs[l];
        {
            let mut gw = ArrayViewMut2::from_shape(
                (block.fan_out, block.fan_in),
                &mut grad[block.weights.clone()],
            )
            .unwrap();
            general_mat_mul(1.0, &a_adj.t(), z, 1.0, &mut gw);
        }
        let gb = a_adj.slice(s![0..batch, ..]).sum_axis(Axis(0));
        for (g, v) in grad[block.bias.clone()].iter_mut().zip(gb.iter()) {
            *g += v;
        }
        if l > 0 {
            adj = a_adj.dot(&weights(net, l));
        } else {
            break;
        }
    }
}

/// `A[g]` at every batch point: a `B × rows` matrix read off the jets of `g`.
pub fn apply_operator(op: &FloatOperator, jets: &BatchJets) -> Result<Array2<f64>> {
    if jets.data.ncols() != op.cols() {
        return Err(Error::shape(format!(
            "operator over {} components applied to {}",
            op.cols(),
            jets.data.ncols()
        )));
    }
    let mut out = Array2::zeros((jets.batch, op.rows()));
    for i in 0..op.rows() {
        for j in 0..op.cols() {
            for (m, c) in op.entry(i, j) {
                let plane = jets.plane(jets.layout.component(m)?);
                out.column_mut(i).scaled_add(*c, &plane.column(j));
            }
        }
    }
    Ok(out)
}

/// Transpose of [`apply_operator`]: spread `∂L/∂A[g]` back onto the jet planes.
pub fn apply_operator_adjoint(
    op: &FloatOperator,
    layout: JetLayout,
    out_adj: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let batch = out_adj.nrows();
    let mut adj = Array2::zeros((layout.ncomp() * batch, op.cols()));
    for i in 0..op.rows() {
        for j in 0..op.cols() {
            for (m, c) in op.entry(i, j) {
                let comp = layout.component(m)?;
                adj.slice_mut(s![comp * batch..(comp + 1) * batch, j])
                    .scaled_add(*c, &out_adj.column(i));
            }
        }
    }
    Ok(adj)
}
