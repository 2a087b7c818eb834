use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward through softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer, weights stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weights,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
}

/// Activations recorded by a forward pass; consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn segments_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.segments_mut().zip(other.segments()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for seg in self.segments_mut() {
            seg.iter_mut().for_each(|x| *x *= s);
        }
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Dimension(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Dimension(format!(
                    "layer {k} parameter buffers do not match its shape"
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `[input → hidden (relu) → output (identity)]`, or a single affine layer
    /// when `hidden == 0`.
    pub fn mlp<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let layers = if hidden == 0 {
            vec![Dense::init(input, output, Activation::Identity, rng)]
        } else {
            vec![
                Dense::init(input, hidden, Activation::Relu, rng),
                Dense::init(hidden, output, Activation::Identity, rng),
            ]
        };
        Self { layers }
    }

    pub fn from_shapes(shapes: &[LayerShape]) -> Result<Self> {
        Self::new(
            shapes
                .iter()
                .map(|s| Dense::zeros(s.in_dim, s.out_dim, s.activation))
                .collect(),
        )
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                activation: l.activation,
            })
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn segments(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn segments_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    /// Zeroes the last layer's weights and sets every output bias to `value`,
    /// making the network a constant function.
    pub fn set_constant_output(&mut self, value: f64) {
        let last = self.layers.last_mut().expect("non-empty network");
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = value);
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        let mut current = x.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&current);
            let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            tape.inputs.push(std::mem::replace(&mut current, a.clone()));
            tape.pre.push(z);
            tape.post.push(a);
        }
        Ok((current, tape))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut current = x.to_vec();
        for layer in &self.layers {
            current = layer
                .pre_activation(&current)
                .into_iter()
                .map(|v| layer.activation.apply(v))
                .collect();
        }
        Ok(current)
    }

    /// Gradients of `output · grad_out` with respect to every parameter and the input.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        let mut grads = NetGrads::zeros_like(self);
        let input_grad = self.backward_accumulate(tape, grad_out, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`backward`](Self::backward) but adds the parameter gradients into `acc`.
    pub fn backward_accumulate(&self, tape: &Tape, grad_out: &[f64], acc: &mut NetGrads) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        if grad_out.len() != self.output_dim() {
            return Err(Error::Tape(format!(
                "output gradient has {} entries, network outputs {}",
                grad_out.len(),
                self.output_dim()
            )));
        }
        if acc.layers.len() != self.layers.len() {
            return Err(Error::Dimension("gradient buffer does not match network".into()));
        }
        let mut upstream = grad_out.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let delta: Vec<f64> = upstream
                .iter()
                .zip(tape.pre[k].iter().zip(&tape.post[k]))
                .map(|(g, (&z, &a))| g * layer.activation.derivative(z, a))
                .collect();
            let x = &tape.inputs[k];
            let lg = &mut acc.layers[k];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                lg.bias[o] += d;
                let row = &mut lg.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(x).for_each(|(w, xi)| *w += d * xi);
            }
            let mut down = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                down.iter_mut().zip(row).for_each(|(g, w)| *g += d * w);
            }
            upstream = down;
        }
        Ok(upstream)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Tape(format!(
                "tape has {} layers, network has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if tape.inputs[k].len() != layer.in_dim || tape.pre[k].len() != layer.out_dim {
                return Err(Error::Tape(format!("tape layer {k} shape does not match network")));
            }
        }
        Ok(())
    }
}
