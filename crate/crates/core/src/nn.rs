//! Dense feed-forward classifiers: inference and backpropagation.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use thiserror::Error;

use crate::data::LabeledSet;
use crate::math;
use crate::rng;
use crate::tensor::{gemm, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("label {label} outside [0, {n_classes})")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("empty data set")]
    EmptySet,
    #[error("invalid model: {0}")]
    Invalid(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Softmax => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Softmax),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// `y = act(x W + b)` with `W: fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Tensor,
    biases: Tensor,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, biases: Tensor, activation: Activation) -> Result<Self, ModelError> {
        if weights.shape().len() != 2 {
            return Err(ModelError::Invalid("weights must be a matrix"));
        }
        if biases.shape() != [weights.shape()[1]] {
            return Err(ModelError::Dimension {
                expected: weights.shape()[1],
                actual: biases.len(),
            });
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn biases(&self) -> &Tensor {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        self.weights.data_mut()
    }

    pub(crate) fn biases_mut(&mut self) -> &mut [f64] {
        self.biases.data_mut()
    }
}

/// An ordered stack of dense layers ending in `n_classes` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<DenseLayer>,
    input_dim: usize,
    n_classes: usize,
}

/// Per-layer parameter gradients, same layout as the layers themselves.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Model {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, ModelError> {
        let first = layers.first().ok_or(ModelError::Invalid("model has no layers"))?;
        let input_dim = first.fan_in();
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(ModelError::Dimension {
                    expected: pair[0].fan_out(),
                    actual: pair[1].fan_in(),
                });
            }
        }
        let last = layers.len() - 1;
        if layers[..last].iter().any(|l| l.activation == Activation::Softmax) {
            return Err(ModelError::Invalid("softmax is only allowed on the final layer"));
        }
        let n_classes = layers[last].fan_out();
        if n_classes < 2 {
            return Err(ModelError::Invalid("a classifier needs at least two classes"));
        }
        Ok(Self {
            layers,
            input_dim,
            n_classes,
        })
    }

    /// ReLU hidden layers and a softmax head, Glorot-uniform weights, zero biases.
    pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = rng::seeded(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(n_classes);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let activation = if i == dims.len() - 2 {
                Activation::Softmax
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::new(
                Tensor::new(vec![fan_in, fan_out], weights)?,
                Tensor::zeros(vec![fan_out])?,
                activation,
            )?);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Number of weight-matrix entries (biases excluded).
    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize, ModelError> {
        if batch.row_len() != self.input_dim {
            return Err(ModelError::Dimension {
                expected: self.input_dim,
                actual: batch.row_len(),
            });
        }
        Ok(batch.rows())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<(), ModelError> {
        match labels.iter().find(|&&y| y >= self.n_classes) {
            Some(&label) => Err(ModelError::InvalidLabel {
                label,
                n_classes: self.n_classes,
            }),
            None => Ok(()),
        }
    }

    /// Runs the batch through every layer, returning an `N x n_classes` tensor.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let n = self.check_batch(batch)?;
        let mut act = batch.data().to_vec();
        for layer in &self.layers {
            let mut z = affine(layer, &act, n);
            apply_activation(layer.activation, &mut z, layer.fan_out());
            act = z;
        }
        Ok(Tensor::from_parts_unchecked(vec![n, self.n_classes], act))
    }

    /// Arg-max class of a single input; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::Dimension {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        let batch = Tensor::from_parts_unchecked(vec![1, x.len()], x.to_vec());
        Ok(self.predict_batch(&batch)?[0])
    }

    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<usize>, ModelError> {
        const CHUNK: usize = 1000;
        let n = self.check_batch(batch)?;
        let d = self.input_dim;
        let mut labels = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let chunk = Tensor::from_parts_unchecked(
                vec![end - start, d],
                batch.data()[start * d..end * d].to_vec(),
            );
            let out = self.forward(&chunk)?;
            labels.extend(out.row_iter().map(argmax));
        }
        Ok(labels)
    }

    /// Fraction of samples whose prediction equals the ground truth.
    pub fn evaluate(&self, data: &LabeledSet) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptySet);
        }
        let predicted = self.predict_batch(data.inputs())?;
        let correct = predicted
            .iter()
            .zip(data.labels())
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Cross-entropy of one sample and its gradient with respect to the input.
    pub fn loss_and_input_grad(&self, x: &[f64], y: usize) -> Result<(f64, Tensor), ModelError> {
        let batch = Tensor::from_parts_unchecked(vec![1, x.len()], x.to_vec());
        let (losses, grads) = self.input_gradients(&batch, &[y])?;
        Ok((losses[0], Tensor::from_parts_unchecked(vec![x.len()], grads)))
    }

    /// Per-sample losses and per-sample input gradients (`N x d`, row-major).
    /// Each row is the gradient of that sample's own loss, not of the batch mean.
    pub fn input_gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let n = self.check_batch(batch)?;
        if labels.len() != n {
            return Err(ModelError::Dimension {
                expected: n,
                actual: labels.len(),
            });
        }
        self.check_labels(labels)?;
        let trace = self.trace(batch.data(), n);
        let (losses, dz) = self.output_delta(&trace, labels, 1.0);
        let (_, input_grad) = self.backward(&trace, dz, n, false);
        Ok((losses, input_grad))
    }

    /// Mean cross-entropy of the batch and its gradient with respect to
    /// every weight and bias, as `(dW, db)` pairs per layer.
    pub fn loss_and_param_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, ParamGrads), ModelError> {
        let n = self.check_batch(batch)?;
        if labels.len() != n {
            return Err(ModelError::Dimension {
                expected: n,
                actual: labels.len(),
            });
        }
        if n == 0 {
            return Err(ModelError::EmptySet);
        }
        self.check_labels(labels)?;
        Ok(self.param_gradients(batch.data(), labels))
    }

    pub(crate) fn param_gradients(&self, inputs: &[f64], labels: &[usize]) -> (f64, ParamGrads) {
        let n = labels.len();
        let trace = self.trace(inputs, n);
        let (losses, dz) = self.output_delta(&trace, labels, 1.0 / n as f64);
        let (grads, _) = self.backward(&trace, dz, n, true);
        (losses.iter().sum::<f64>() / n as f64, grads)
    }

    /// Pre-activations and activations of every layer for a batch of `n` rows.
    fn trace(&self, inputs: &[f64], n: usize) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(inputs.to_vec());
        for layer in &self.layers {
            let z = affine(layer, acts.last().unwrap(), n);
            let mut a = z.clone();
            apply_activation(layer.activation, &mut a, layer.fan_out());
            pre.push(z);
            acts.push(a);
        }
        Trace { acts, pre }
    }

    /// Per-sample cross-entropy and `dLoss/dZ` of the final layer, scaled.
    ///
    /// The final layer's output is read as logits unless it is a softmax, in
    /// which case its pre-activation is.
    fn output_delta(&self, trace: &Trace, labels: &[usize], scale: f64) -> (Vec<f64>, Vec<f64>) {
        let last = self.layers.len() - 1;
        let c = self.n_classes;
        let softmax_head = self.layers[last].activation == Activation::Softmax;
        let logits = if softmax_head {
            &trace.pre[last]
        } else {
            &trace.acts[last + 1]
        };
        let mut delta = logits.clone();
        let mut losses = Vec::with_capacity(labels.len());
        for (row, &y) in delta.chunks_exact_mut(c).zip(labels) {
            let lse = log_sum_exp(row);
            losses.push(lse - row[y]);
            for v in row.iter_mut() {
                *v = math::exp(*v - lse) * scale;
            }
            row[y] -= scale;
        }
        if !softmax_head {
            chain_activation(self.layers[last].activation, &mut delta, &trace.pre[last]);
        }
        (losses, delta)
    }

    /// Backpropagates `dz` of the final layer. Returns parameter gradients
    /// (empty unless requested) and the input gradient.
    fn backward(&self, trace: &Trace, mut dz: Vec<f64>, n: usize, want_params: bool) -> (ParamGrads, Vec<f64>) {
        let mut grads = Vec::with_capacity(if want_params { self.layers.len() } else { 0 });
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (fin, fout) = (layer.fan_in(), layer.fan_out());
            if want_params {
                let mut dw = vec![0.0; fin * fout];
                gemm(&trace.acts[l], true, &dz, false, &mut dw, fin, n, fout, 0.0);
                let mut db = vec![0.0; fout];
                for row in dz.chunks_exact(fout) {
                    for (b, g) in db.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                grads.push((dw, db));
            }
            let mut da = vec![0.0; n * fin];
            gemm(&dz, false, layer.weights.data(), true, &mut da, n, fout, fin, 0.0);
            if l > 0 {
                chain_activation(self.layers[l - 1].activation, &mut da, &trace.pre[l - 1]);
            }
            dz = da;
        }
        grads.reverse();
        (ParamGrads { layers: grads }, dz)
    }
}

struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn affine(layer: &DenseLayer, input: &[f64], n: usize) -> Vec<f64> {
    let fout = layer.fan_out();
    let mut z = Vec::with_capacity(n * fout);
    for _ in 0..n {
        z.extend_from_slice(layer.biases.data());
    }
    gemm(input, false, layer.weights.data(), false, &mut z, n, layer.fan_in(), fout, 1.0);
    z
}

fn apply_activation(act: Activation, z: &mut [f64], width: usize) {
    match act {
        Activation::Identity => {}
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => z.chunks_exact_mut(width).for_each(softmax_in_place),
    }
}

/// Multiplies an upstream gradient by the activation derivative at `pre`.
fn chain_activation(act: Activation, grad: &mut [f64], pre: &[f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for (g, &z) in grad.iter_mut().zip(pre) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Softmax => unreachable!("softmax only appears on the head"),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry, first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
