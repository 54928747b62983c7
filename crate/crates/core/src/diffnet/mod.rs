//! Feed-forward embedding network with hand-written reverse-mode gradients.
//!
//! The network is a chain of dense layers `h_{l+1} = act(W_l h_l + b_l)`;
//! the activation is skipped on the last layer unless
//! [`NetworkSpec::activate_output`] is set. [`forward`] returns the
//! embeddings together with a [`ForwardTape`] that [`backward`] consumes to
//! produce parameter gradients.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState, GradientBundle};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ShapeError;
use crate::matrix::{axpy, dot, Matrix};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("forward tape does not belong to these parameters: {0}")]
    StaleTape(String),
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Architecture of the embedding network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Output width of every layer; the last entry is the latent dimension.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Also apply the activation to the final layer's output.
    #[serde(default)]
    pub activate_output: bool,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self {
            input_dim,
            layer_widths,
            activation,
            activate_output: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 {
            return Err(NetworkError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.layer_widths.is_empty() {
            return Err(NetworkError::InvalidSpec("layer_widths is empty".into()));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(NetworkError::InvalidSpec(format!("layer {i} has zero width")));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len()
    }

    /// `(fan_out, fan_in)` per layer.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ins = std::iter::once(self.input_dim).chain(self.layer_widths.iter().copied());
        self.layer_widths.iter().copied().zip(ins)
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().map(|(out, inp)| out * inp + out).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `fan_out × fan_in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<DenseLayer>,
    /// Bumped on every optimizer step; a tape records the value it saw.
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl NetworkParams {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Self {
        Self {
            layers,
            generation: 0,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn bump_generation(&mut self) {
        self.generation = self.generation.wrapping_add(1);
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<(), NetworkError> {
        if self.layers.len() != spec.num_layers() {
            return Err(ShapeError::new("layer count", spec.num_layers(), self.layers.len()).into());
        }
        for (l, ((out, inp), layer)) in spec.layer_shapes().zip(&self.layers).enumerate() {
            if layer.fan_out() != out {
                return Err(ShapeError::new(format!("layer {l} rows"), out, layer.fan_out()).into());
            }
            if layer.fan_in() != inp {
                return Err(ShapeError::new(format!("layer {l} cols"), inp, layer.fan_in()).into());
            }
            if layer.bias.len() != out {
                return Err(ShapeError::new(format!("layer {l} bias"), out, layer.bias.len()).into());
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(NetworkError::InvalidSpec(format!("layer {l} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn flat_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }
}

/// Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))`) from a ChaCha8 stream
/// seeded with `spec.seed`; zero biases.
pub fn init_params(spec: &NetworkSpec) -> Result<NetworkParams, NetworkError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = spec
        .layer_shapes()
        .map(|(out, inp)| {
            let bound = glorot_bound(inp, out);
            let data = (0..out * inp)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            DenseLayer {
                weights: Matrix::from_vec(out, inp, data).expect("sized above"),
                bias: vec![0.0; out],
            }
        })
        .collect();
    Ok(NetworkParams::from_layers(layers))
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Activations recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    generation: u64,
    shapes: Vec<(usize, usize)>,
    activation: Activation,
    activate_output: bool,
    input: Matrix,
    /// Output of each layer after its activation (if any).
    outputs: Vec<Matrix>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn embeddings(&self) -> &Matrix {
        self.outputs.last().expect("tape has at least one layer")
    }
}

pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &Matrix,
) -> Result<(Matrix, ForwardTape), NetworkError> {
    spec.validate()?;
    params.check_against(spec)?;
    if batch.cols() != spec.input_dim {
        return Err(ShapeError::new("batch columns", spec.input_dim, batch.cols()).into());
    }
    let n = batch.rows();
    let last = params.layers.len() - 1;
    let mut outputs: Vec<Matrix> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let input = if l == 0 { batch } else { &outputs[l - 1] };
        let activate = l != last || spec.activate_output;
        let mut out = Matrix::zeros(n, layer.fan_out());
        for i in 0..n {
            let x = input.row(i);
            let y = out.row_mut(i);
            for (o, yo) in y.iter_mut().enumerate() {
                let pre = dot(layer.weights.row(o), x) + layer.bias[o];
                *yo = if activate { spec.activation.apply(pre) } else { pre };
            }
        }
        outputs.push(out);
    }
    let embeddings = outputs[last].clone();
    let tape = ForwardTape {
        generation: params.generation,
        shapes: spec.layer_shapes().collect(),
        activation: spec.activation,
        activate_output: spec.activate_output,
        input: batch.clone(),
        outputs,
    };
    Ok((embeddings, tape))
}

/// Embeds a batch without keeping a tape.
pub fn embed(spec: &NetworkSpec, params: &NetworkParams, batch: &Matrix) -> Result<Matrix, NetworkError> {
    forward(spec, params, batch).map(|(z, _)| z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients shaped like [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Matrix::zeros(l.fan_out(), l.fan_in()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }
}

/// Gradient of `sum(upstream ⊙ embeddings)` with respect to every weight and
/// bias, given the tape of the forward pass that produced `embeddings`.
pub fn backward(
    tape: &ForwardTape,
    params: &NetworkParams,
    upstream: &Matrix,
) -> Result<NetworkGrads, NetworkError> {
    if tape.generation != params.generation {
        return Err(NetworkError::StaleTape(format!(
            "tape generation {} vs parameters generation {}",
            tape.generation, params.generation
        )));
    }
    let shapes: Vec<(usize, usize)> = params
        .layers
        .iter()
        .map(|l| (l.fan_out(), l.fan_in()))
        .collect();
    if shapes != tape.shapes {
        return Err(NetworkError::StaleTape("layer shapes differ".into()));
    }
    let n = tape.batch_size();
    let latent = shapes.last().map(|s| s.0).unwrap_or(0);
    if upstream.rows() != n {
        return Err(ShapeError::new("upstream rows", n, upstream.rows()).into());
    }
    if upstream.cols() != latent {
        return Err(ShapeError::new("upstream columns", latent, upstream.cols()).into());
    }

    let mut grads = NetworkGrads::zeros_like(params);
    let last = params.layers.len() - 1;
    let mut delta = upstream.clone();
    for l in (0..=last).rev() {
        let layer = &params.layers[l];
        if l != last || tape.activate_output {
            let out = &tape.outputs[l];
            for (d, &y) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *d *= tape.activation.derivative_from_output(y);
            }
        }
        let input = if l == 0 { &tape.input } else { &tape.outputs[l - 1] };
        let g = &mut grads.layers[l];
        for i in 0..n {
            let d = delta.row(i);
            let x = input.row(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv != 0.0 {
                    axpy(dv, x, g.weights.row_mut(o));
                    g.bias[o] += dv;
                }
            }
        }
        if l > 0 {
            let mut prev = Matrix::zeros(n, layer.fan_in());
            for i in 0..n {
                let d = delta.row(i);
                let p = prev.row_mut(i);
                for (o, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        axpy(dv, layer.weights.row(o), p);
                    }
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}
