//! Dense feed-forward network with softmax cross-entropy, evaluated over a
//! flat parameter vector.
//!
//! Parameter layout: for each layer `in -> out`, the `out x in` weight matrix
//! in row-major order followed by the `out` biases. Hidden layers use ReLU
//! (derivative 0 at 0); the last layer emits logits.
//!
//! All reductions over a batch run sequentially in row order.

use std::ops::{Deref, DerefMut, Range};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Flat vector of model weights, updates, gradients or perturbations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParameterVector) -> ParameterVector {
        debug_assert_eq!(self.len(), other.len());
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, scale: f64, other: &ParameterVector) -> ParameterVector {
        debug_assert_eq!(self.len(), other.len());
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    pub fn scale(&self, factor: f64) -> ParameterVector {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn dot(&self, other: &ParameterVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    widths: Vec<usize>,
    activation: Activation,
    num_params: usize,
}

impl MlpArchitecture {
    /// `widths` lists input, hidden and output widths in order.
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least input and output widths, got {widths:?}"
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArchitecture(format!(
                "width at position {pos} is zero"
            )));
        }
        let mut num_params = 0usize;
        for pair in widths.windows(2) {
            let layer = pair[0]
                .checked_mul(pair[1])
                .and_then(|w| w.checked_add(pair[1]))
                .and_then(|l| num_params.checked_add(l));
            num_params = layer.ok_or_else(|| {
                Error::InvalidArchitecture("parameter count overflows".to_string())
            })?;
        }
        Ok(Self {
            widths,
            activation,
            num_params,
        })
    }

    pub fn relu(widths: &[usize]) -> Result<Self> {
        Self::new(widths.to_vec(), Activation::Relu)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Parameter range of each layer: weight matrix followed by its bias.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.widths
            .windows(2)
            .map(|pair| {
                let len = pair[0] * pair[1] + pair[1];
                let range = start..start + len;
                start += len;
                range
            })
            .collect()
    }

    fn check_params(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.num_params {
            return Err(Error::DimensionMismatch {
                expected: self.num_params,
                actual: w.len(),
                context: "parameter vector",
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: batch.dim(),
                context: "batch input width",
            });
        }
        if let Some(&label) = batch.labels().iter().find(|&&l| l >= self.classes()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes(),
            });
        }
        Ok(())
    }
}

/// A minibatch: row-major inputs plus one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "input width must be positive"));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: inputs.len(),
                context: "batch inputs (rows x dim)",
            });
        }
        Ok(Self {
            inputs,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

/// A differentiable training loss over a flat parameter vector.
///
/// The MLP is the production implementation; tests plug in toy objectives
/// (quadratics, counting wrappers) through the same interface.
pub trait Objective: Sync {
    fn num_params(&self) -> usize;

    fn loss(&self, w: &[f64], batch: &Batch) -> Result<f64>;

    fn loss_and_grad(&self, w: &[f64], batch: &Batch) -> Result<(f64, ParameterVector)>;

    /// Contiguous parameter groups used for per-layer operations
    /// (sparsification, filter normalization).
    fn param_blocks(&self) -> Vec<Range<usize>>;
}

/// Deterministic Glorot-uniform initialization; biases start at zero.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> ParameterVector {
    let mut rng = rng::seeded(seed, Purpose::Init);
    let mut w = Vec::with_capacity(arch.num_params());
    for pair in arch.widths().windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        w.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
        w.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParameterVector(w)
}

struct Layer<'a> {
    weights: &'a [f64],
    bias: &'a [f64],
    fan_in: usize,
    fan_out: usize,
}

impl MlpArchitecture {
    fn layers<'a>(&self, w: &'a [f64]) -> Vec<Layer<'a>> {
        self.widths
            .windows(2)
            .zip(self.layer_ranges())
            .map(|(pair, range)| {
                let block = &w[range];
                let (weights, bias) = block.split_at(pair[0] * pair[1]);
                Layer {
                    weights,
                    bias,
                    fan_in: pair[0],
                    fan_out: pair[1],
                }
            })
            .collect()
    }

    /// Forward pass of one row; returns the activations of every layer
    /// (index 0 is the input, the last entry holds the logits).
    fn forward_row(&self, layers: &[Layer<'_>], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let input = &acts[l];
            let mut out = layer.bias.to_vec();
            for (o, z) in out.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                *z += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < layers.len() {
                match self.activation {
                    Activation::Relu => out.iter_mut().for_each(|z| *z = z.max(0.0)),
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Logits for every row of `batch`, row-major.
    pub fn logits(&self, w: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        self.check_params(w)?;
        self.check_batch(batch)?;
        let layers = self.layers(w);
        let mut out = Vec::with_capacity(batch.len() * self.classes());
        for i in 0..batch.len() {
            let acts = self.forward_row(&layers, batch.row(i));
            out.extend_from_slice(acts.last().expect("at least one layer"));
        }
        Ok(out)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    (log_sum_exp(logits) - logits[label]).max(0.0)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Objective for MlpArchitecture {
    fn num_params(&self) -> usize {
        self.num_params
    }

    fn loss(&self, w: &[f64], batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyData("loss over an empty batch"));
        }
        let classes = self.classes();
        let logits = self.logits(w, batch)?;
        let total: f64 = logits
            .chunks(classes)
            .zip(batch.labels())
            .map(|(z, &y)| cross_entropy(z, y))
            .sum();
        Ok(total / batch.len() as f64)
    }

    fn loss_and_grad(&self, w: &[f64], batch: &Batch) -> Result<(f64, ParameterVector)> {
        self.check_params(w)?;
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Err(Error::EmptyData("gradient over an empty batch"));
        }
        let layers = self.layers(w);
        let ranges = self.layer_ranges();
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.num_params];
        let mut total = 0.0;

        for i in 0..batch.len() {
            let acts = self.forward_row(&layers, batch.row(i));
            let logits = acts.last().expect("at least one layer");
            let label = batch.labels()[i];
            total += cross_entropy(logits, label);

            // d(loss_i / n) / d(logits) = (softmax - onehot) / n
            let lse = log_sum_exp(logits);
            let mut upstream: Vec<f64> = logits.iter().map(|z| (z - lse).exp() / n).collect();
            upstream[label] -= 1.0 / n;

            for l in (0..layers.len()).rev() {
                let layer = &layers[l];
                let input = &acts[l];
                let block = &mut grad[ranges[l].clone()];
                let (gw, gb) = block.split_at_mut(layer.fan_in * layer.fan_out);
                for (o, &u) in upstream.iter().enumerate() {
                    gb[o] += u;
                    let row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
                    row.iter_mut().zip(input).for_each(|(g, x)| *g += u * x);
                }
                if l == 0 {
                    break;
                }
                let mut down = vec![0.0; layer.fan_in];
                for (o, &u) in upstream.iter().enumerate() {
                    let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    down.iter_mut().zip(row).for_each(|(d, wv)| *d += u * wv);
                }
                // ReLU'(z) = 1 iff the post-activation value is positive.
                down.iter_mut().zip(input).for_each(|(d, &a)| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                upstream = down;
            }
        }

        let grad = ParameterVector(grad);
        if !grad.is_finite() || !total.is_finite() {
            return Err(Error::NonFinite("loss_and_grad"));
        }
        Ok((total / n, grad))
    }

    fn param_blocks(&self) -> Vec<Range<usize>> {
        self.layer_ranges()
    }
}

/// Loss and accuracy of a model on a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(w: &[f64], arch: &MlpArchitecture, data: &Batch) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set"));
    }
    let classes = arch.classes();
    let logits = arch.logits(w, data)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (z, &y) in logits.chunks(classes).zip(data.labels()) {
        loss += cross_entropy(z, y);
        if argmax(z) == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}
