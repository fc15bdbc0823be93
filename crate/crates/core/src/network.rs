//! Fully connected networks: architecture, parameters, forward pass.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffops::OperatorMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Sin,
    Relu,
}

impl Activation {
    /// `[φ(a), φ'(a), φ''(a), φ'''(a)]`.
    #[inline]
    pub fn derivatives(self, a: f64) -> [f64; 4] {
        match self {
            Activation::Identity => [a, 1.0, 0.0, 0.0],
            Activation::Tanh => {
                let t = a.tanh();
                let d1 = 1.0 - t * t;
                [t, d1, -2.0 * t * d1, d1 * (6.0 * t * t - 2.0)]
            }
            Activation::Sigmoid => {
                let s = 0.5 * (1.0 + (0.5 * a).tanh());
                let d1 = s * (1.0 - s);
                let d2 = d1 * (1.0 - 2.0 * s);
                [s, d1, d2, d2 * (1.0 - 2.0 * s) - 2.0 * d1 * d1]
            }
            Activation::Sin => {
                let (s, c) = a.sin_cos();
                [s, c, -s, -c]
            }
            Activation::Relu => {
                if a > 0.0 {
                    [a, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
        }
    }

    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Identity => a,
            Activation::Tanh => a.tanh(),
            Activation::Sigmoid => 0.5 * (1.0 + (0.5 * a).tanh()),
            Activation::Sin => a.sin(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Highest input-derivative order the jet engine propagates through this activation.
    pub fn max_jet_order(self) -> usize {
        match self {
            Activation::Relu => 1,
            _ => 2,
        }
    }

    /// Whether `φ^(k)` is a non-constant function, so that order-`k`
    /// derivatives of the network still depend on the input.
    fn varying_derivative(self, k: usize) -> bool {
        match self {
            Activation::Tanh | Activation::Sigmoid | Activation::Sin => k <= 2,
            Activation::Identity => k == 0,
            Activation::Relu => k == 0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Sin => "sin",
            Activation::Relu => "relu",
        };
        f.write_str(s)
    }
}

/// Layer widths `[D, hidden…, K]` and one activation per weight layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

#[derive(Deserialize)]
struct RawSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl TryFrom<RawSpec> for MlpSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        MlpSpec::new(raw.widths, raw.activations)
    }
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("a network needs input and output widths".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} activations for {} weight layers",
                activations.len(),
                widths.len() - 1
            )));
        }
        if activations.last() != Some(&Activation::Identity) {
            return Err(Error::Config("output layer activation must be identity".into()));
        }
        Ok(MlpSpec {
            widths,
            activations,
        })
    }

    /// `input → hidden… → output` with one activation on every hidden layer.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut acts = vec![activation; hidden.len()];
        acts.push(Activation::Identity);
        Self::new(widths, acts)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layout(&self) -> Vec<LayerBlock> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .zip(&self.activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerBlock {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                    activation,
                }
            })
            .collect()
    }

    /// Largest input-derivative order the jet engine supports for this network.
    pub fn max_jet_order(&self) -> usize {
        self.activations
            .iter()
            .map(|a| a.max_jet_order())
            .min()
            .unwrap_or(2)
    }

    /// Check the activations can carry the derivatives `op` takes of the output.
    pub fn validate_for_operator(&self, op: &OperatorMatrix) -> Result<(), Rejection> {
        let order = op.max_derivative_order();
        if order == 0 {
            return Ok(());
        }
        if order > 2 {
            return Err(Rejection(format!(
                "operator of order {order}; derivatives are available up to order 2"
            )));
        }
        let hidden = &self.activations[..self.activations.len() - 1];
        if hidden.is_empty() {
            return Err(Rejection(format!(
                "no hidden layer: every order-{order} derivative of an affine map is constant"
            )));
        }
        if let Some(a) = hidden.iter().find(|a| !a.varying_derivative(order)) {
            return Err(Rejection(format!(
                "{a} has a constant or undefined derivative of order {order}; \
                 the transformed field would be piecewise constant"
            )));
        }
        Ok(())
    }
}

/// Why a network cannot be combined with an operator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection(pub String);

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Position of one layer's `W` (row-major `fan_out × fan_in`) and `b` in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBlock {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
    pub activation: Activation,
}

/// Flat trainable parameters in [`MlpSpec::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0.0; spec.param_count()];
        for block in spec.layout() {
            let limit = (6.0 / (block.fan_in + block.fan_out) as f64).sqrt();
            for w in &mut v[block.weights] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        ParamVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A network specification together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "{} parameters for a network with {}",
                params.len(),
                spec.param_count()
            )));
        }
        Ok(Mlp { spec, params })
    }

    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        let params = ParamVector::init(&spec, seed);
        Mlp { spec, params }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, x)
    }

    /// Mask over the flat parameters: `true` for weights, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for block in self.spec.layout() {
            mask[block.weights].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Write `<stem>.bin` (little-endian f64) and `<stem>.json` header.
    pub fn save(&self, stem: &Path, seed: u64) -> Result<()> {
        let header = ParamsHeader {
            widths: self.spec.widths.clone(),
            activations: self.spec.activations.clone(),
            seed,
            count: self.params.len(),
        };
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        let bytes: Vec<u8> = self.params.0.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(stem.with_extension("bin"), bytes)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(Self, u64)> {
        let header: ParamsHeader = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        let spec = MlpSpec::new(header.widths, header.activations)?;
        let bytes = fs::read(stem.with_extension("bin"))?;
        if bytes.len() != header.count * 8 || header.count != spec.param_count() {
            return Err(Error::shape(format!(
                "parameter blob holds {} bytes, header declares {} values",
                bytes.len(),
                header.count
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Mlp::new(spec, ParamVector(values))?, header.seed))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    seed: u64,
    count: usize,
}

/// `h_L(…h_1(x))` with `h_l(z) = φ_l(W_l z + b_l)`.
pub fn forward(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.input_dim() {
        return Err(Error::shape(format!(
            "input of length {} for a network over {} inputs",
            x.len(),
            spec.input_dim()
        )));
    }
    if params.len() != spec.param_count() {
        return Err(Error::shape("parameter vector does not match the network"));
    }
    let p = &params.0;
    let mut z = x.to_vec();
    for block in spec.layout() {
        let w = &p[block.weights.clone()];
        let b = &p[block.bias.clone()];
        z = (0..block.fan_out)
            .map(|o| {
                let row = &w[o * block.fan_in..(o + 1) * block.fan_in];
                let mut acc = b[o];
                for (wi, zi) in row.iter().zip(&z) {
                    acc = acc + wi * zi;
                }
                block.activation.apply(acc)
            })
            .collect();
    }
    Ok(z)
}
