use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::kernels;
use super::tape::{NodeId, ParamKind, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Default hidden widths: two rectified layers of 64.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Fully connected classifier producing pre-softmax class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

impl Mlp {
    /// Assembles a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "at least one layer required"));
        }
        for (i, l) in layers.iter().enumerate() {
            let (o, _) = l.weight.dims2()?;
            if l.bias.shape() != [o] {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("bias [{o}]"),
                    format!("{:?} at layer {i}", l.bias.shape()),
                ));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {} input {}", i + 1, pair[0].outputs()),
                    pair[1].inputs(),
                ));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Uniform fan-in initialization, `U(-1/√in, 1/√in)` for weights and biases.
    pub fn new(input: usize, hidden: &[usize], classes: usize, activation: Activation, seed: u64) -> Result<Self> {
        if input == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::invalid("widths", "all layer widths must be positive"));
        }
        let mut rng = rng::stream(seed, 0x4d4c50, 0);
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Tensor::new(vec![fan_out, fan_in], weight).expect("sized"),
                    bias: Tensor::new(vec![fan_out], bias).expect("sized"),
                }
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(Layer::outputs).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(usize, usize)> {
        let (rows, d) = batch.dims2()?;
        if d != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("batch of shape [B, {}]", self.input_dim()),
                format!("{:?}", batch.shape()),
            ));
        }
        Ok((rows, d))
    }

    /// Class scores without recording anything.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (rows, _) = self.check_batch(batch)?;
        let mut h = batch.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = kernels::linear(&h, rows, l.inputs(), l.weight.data(), l.bias.data());
            if i < last && self.activation == Activation::Relu {
                h = kernels::relu(&h);
            }
        }
        Tensor::matrix(rows, self.classes(), h)
    }

    /// Class scores recorded on `tape` for differentiation.
    pub fn forward_tape(&self, tape: &mut Tape, batch: &Tensor) -> Result<NodeId> {
        self.check_batch(batch)?;
        let mut h = tape.input(batch)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let w = tape.param(i, ParamKind::Weight, &l.weight);
            let b = tape.param(i, ParamKind::Bias, &l.bias);
            h = tape.linear(h, w, b)?;
            if i < last && self.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub(crate) fn accumulate_param_grad(&mut self, layer: usize, kind: ParamKind, g: &[f64]) -> Result<()> {
        let l = self.layers.get_mut(layer).ok_or_else(|| Error::invalid("layer", format!("no layer {layer}")))?;
        match kind {
            ParamKind::Weight => l.weight.accumulate_grad(g),
            ParamKind::Bias => l.bias.accumulate_grad(g),
        }
    }

    pub(crate) fn ensure_grads(&mut self) {
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                if t.grad().is_none() {
                    let zeros = vec![0.0; t.len()];
                    t.accumulate_grad(&zeros).expect("same length");
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.weight.clear_grad();
            l.bias.clear_grad();
        }
    }

    /// Flat copy of all parameters, layer by layer (weight then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied()).collect()
    }

    /// Flat copy of all gradients in [`Mlp::flat_params`] order; `None` if any are missing.
    pub fn flat_grads(&self) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.grad()?);
            out.extend_from_slice(l.bias.grad()?);
        }
        Some(out)
    }

    /// Overwrites all parameters from a flat vector in [`Mlp::flat_params`] order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::shape("set_flat_params", self.parameter_count(), flat.len()));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", format!("must be nonnegative, got {weight_decay}")));
        }
        Ok(Self { momentum, weight_decay, velocity: Vec::new() })
    }

    /// Applies one update and clears the model's gradients.
    pub fn step(&mut self, model: &mut Mlp, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid("lr", format!("must be nonnegative, got {lr}")));
        }
        for (i, l) in model.layers.iter().enumerate() {
            if l.weight.grad().is_none() || l.bias.grad().is_none() {
                return Err(Error::MissingGradient { layer: i });
            }
        }
        if self.velocity.is_empty() {
            self.velocity =
                model.layers.iter().flat_map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]]).collect();
        }
        let mut slot = 0;
        for l in &mut model.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let g = t.take_grad().expect("checked above");
                let v = &mut self.velocity[slot];
                for ((vi, gi), p) in v.iter_mut().zip(&g).zip(t.data_mut()) {
                    *vi = self.momentum * *vi + gi + self.weight_decay * *p;
                    *p -= lr * *vi;
                }
                slot += 1;
            }
        }
        Ok(())
    }
}

/// One-shot form of [`Sgd::step`] with fresh (zero) velocity.
pub fn sgd_step(model: &mut Mlp, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    Sgd::new(momentum, weight_decay)?.step(model, lr)
}
