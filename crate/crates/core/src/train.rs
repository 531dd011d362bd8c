//! Mini-batch training with cross-entropy loss.

use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::data::LabeledSet;
use crate::math;
use crate::nn::{Model, ModelError, ParamGrads};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Update rule applied to the averaged mini-batch gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// `w -= lr * g`
    Sgd,
    /// `v = rho v + (1 - rho) g^2; w -= lr * g / (sqrt(v) + eps)`
    RmsProp { rho: f64, eps: f64 },
}

impl Optimizer {
    /// RMSprop with Keras' defaults.
    pub const fn rmsprop() -> Self {
        Optimizer::RmsProp { rho: 0.9, eps: 1e-7 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::RmsProp { .. } => "rmsprop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 10,
            rng_seed: 0,
            optimizer: Optimizer::rmsprop(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(ModelError::Config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// A trained model and its epoch-average training losses.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
}

/// Stateful epoch runner: owns the shuffling RNG and optimizer accumulators.
pub struct Trainer {
    cfg: TrainConfig,
    rng: Rng,
    /// RMSprop second-moment estimates, one buffer per weight/bias tensor.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &Model) -> Result<Self, ModelError> {
        cfg.validate()?;
        let moments = match cfg.optimizer {
            Optimizer::Sgd => Vec::new(),
            Optimizer::RmsProp { .. } => model
                .layers()
                .iter()
                .map(|l| (vec![0.0; l.weights().len()], vec![0.0; l.biases().len()]))
                .collect(),
        };
        Ok(Self {
            rng: rng::seeded(cfg.rng_seed),
            cfg,
            moments,
        })
    }

    /// One shuffled pass over `inputs`; returns the sample-averaged loss.
    /// The last incomplete batch is kept.
    pub fn epoch(&mut self, model: &mut Model, inputs: &Tensor, labels: &[usize]) -> Result<f64, ModelError> {
        let n = labels.len();
        let d = model.input_dim();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batch = Vec::with_capacity(self.cfg.batch_size.min(n) * d);
        let mut batch_labels = Vec::with_capacity(self.cfg.batch_size.min(n));
        for chunk in order.chunks(self.cfg.batch_size) {
            batch.clear();
            batch_labels.clear();
            for &i in chunk {
                batch.extend_from_slice(inputs.row(i));
                batch_labels.push(labels[i]);
            }
            let (loss, grads) = model.param_gradients(&batch, &batch_labels);
            total += loss * chunk.len() as f64;
            self.apply(model, &grads);
        }
        Ok(total / n as f64)
    }

    fn apply(&mut self, model: &mut Model, grads: &ParamGrads) {
        let lr = self.cfg.learning_rate;
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                for (layer, (dw, db)) in model.layers_mut().iter_mut().zip(&grads.layers) {
                    sgd_step(layer.weights_mut(), dw, lr);
                    sgd_step(layer.biases_mut(), db, lr);
                }
            }
            Optimizer::RmsProp { rho, eps } => {
                for ((layer, (dw, db)), (vw, vb)) in model
                    .layers_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(self.moments.iter_mut())
                {
                    rmsprop_step(layer.weights_mut(), dw, vw, lr, rho, eps);
                    rmsprop_step(layer.biases_mut(), db, vb, lr, rho, eps);
                }
            }
        }
    }
}

fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

fn rmsprop_step(params: &mut [f64], grads: &[f64], moments: &mut [f64], lr: f64, rho: f64, eps: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
        *v = rho * *v + (1.0 - rho) * g * g;
        *p -= lr * g / (math::sqrt(*v) + eps);
    }
}

fn check_training_set(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<(), ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptySet);
    }
    if inputs.row_len() != model.input_dim() {
        return Err(ModelError::Dimension {
            expected: model.input_dim(),
            actual: inputs.row_len(),
        });
    }
    if inputs.rows() != labels.len() {
        return Err(ModelError::Dimension {
            expected: inputs.rows(),
            actual: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= model.n_classes()) {
        return Err(ModelError::InvalidLabel {
            label,
            n_classes: model.n_classes(),
        });
    }
    Ok(())
}

/// Trains a copy of `model` on `data`.
///
/// A rise of the epoch-average loss within the first three epochs is logged
/// as a warning; it does not fail the run.
pub fn train(model: &Model, data: &LabeledSet, cfg: &TrainConfig) -> Result<Trained, ModelError> {
    fit(model, data.inputs(), data.labels(), cfg)
}

/// Fine-tunes a copy of `model` on an arbitrary labeled batch. Sets smaller
/// than the batch size are processed full-batch.
pub fn fine_tune(model: &Model, inputs: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<Trained, ModelError> {
    fit(model, inputs, labels, cfg)
}

fn fit(model: &Model, inputs: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<Trained, ModelError> {
    cfg.validate()?;
    check_training_set(model, inputs, labels)?;
    let mut model = model.clone();
    let mut trainer = Trainer::new(cfg.clone(), &model)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = trainer.epoch(&mut model, inputs, labels)?;
        if epoch > 0 && epoch < 3 && loss > epoch_losses[epoch - 1] {
            log::warn!(
                "training loss rose from {} to {} at epoch {}",
                epoch_losses[epoch - 1],
                loss,
                epoch + 1
            );
        }
        epoch_losses.push(loss);
    }
    Ok(Trained { model, epoch_losses })
}
