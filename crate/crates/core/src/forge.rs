//! Adversarial candidates from one gradient step, sorted into true and false
//! adversaries.

use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::LabeledSet;
use crate::math;
use crate::nn::{Model, ModelError};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForgeError {
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("input pixel outside [0, 1]")]
    InputRange,
    #[error("non-finite input gradient")]
    NonFiniteGradient,
    #[error("no base sample is classified correctly")]
    NoCorrectBase,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Norm bounding the perturbation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    /// Change only the coordinate with the largest gradient magnitude by `eps`.
    L1,
    /// Step `eps` along the normalized gradient.
    L2,
    /// Step `eps` along the gradient sign (FGSM).
    Linf,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Some(Norm::L1),
            "l2" => Some(Norm::L2),
            "linf" | "l-inf" | "inf" => Some(Norm::Linf),
            _ => None,
        }
    }

    /// Size of `delta` measured in this norm.
    pub fn measure(self, delta: &[f64]) -> f64 {
        match self {
            Norm::L1 => delta.iter().map(|v| v.abs()).sum(),
            Norm::L2 => math::sqrt(delta.iter().map(|v| v * v).sum()),
            Norm::Linf => delta.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryCandidate {
    pub base: Tensor,
    pub base_label: usize,
    pub perturbed: Tensor,
    pub epsilon: f64,
    pub norm: Norm,
    pub base_source_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateKind {
    TrueAdv,
    FalseAdv,
    Rejected,
}

/// Applies one steepest-ascent step of size `epsilon` to `x` and clamps the
/// result to `[0, 1]`. A zero gradient leaves `x` unchanged.
pub fn perturb(x: &[f64], grad: &[f64], epsilon: f64, norm: Norm) -> Result<Vec<f64>, ForgeError> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(ForgeError::NonFiniteGradient);
    }
    let mut out = x.to_vec();
    match norm {
        Norm::Linf => {
            for (o, &g) in out.iter_mut().zip(grad) {
                *o += epsilon * sign(g);
            }
        }
        Norm::L2 => {
            let len = math::sqrt(grad.iter().map(|g| g * g).sum());
            if len > 0.0 {
                for (o, &g) in out.iter_mut().zip(grad) {
                    *o += epsilon * g / len;
                }
            }
        }
        Norm::L1 => {
            let mut j = 0;
            for (i, g) in grad.iter().enumerate() {
                if g.abs() > grad[j].abs() {
                    j = i;
                }
            }
            out[j] += epsilon * sign(grad[j]);
        }
    }
    for o in out.iter_mut() {
        *o = o.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_request(x: &[f64], epsilon: f64) -> Result<(), ForgeError> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(ForgeError::Epsilon(epsilon));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(ForgeError::InputRange);
    }
    Ok(())
}

/// Fast gradient step on the cross-entropy loss of `(x, y)`.
pub fn fgsm(model: &Model, x: &[f64], y: usize, epsilon: f64, norm: Norm) -> Result<Tensor, ForgeError> {
    check_request(x, epsilon)?;
    let (_, grad) = model.loss_and_input_grad(x, y)?;
    let out = perturb(x, grad.data(), epsilon, norm)?;
    Ok(Tensor::new(vec![out.len()], out).expect("clamped values are finite"))
}

/// Batched [`fgsm`] over the listed samples of `data`.
pub(crate) fn fgsm_rows(
    model: &Model,
    data: &LabeledSet,
    rows: &[usize],
    epsilon: f64,
    norm: Norm,
) -> Result<Vec<Vec<f64>>, ForgeError> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(ForgeError::Epsilon(epsilon));
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let batch = data.subset(rows);
    let (_, grads) = model.input_gradients(batch.inputs(), batch.labels())?;
    let d = data.dim();
    batch
        .inputs()
        .row_iter()
        .zip(grads.chunks_exact(d))
        .map(|(x, g)| perturb(x, g, epsilon, norm))
        .collect()
}

/// Sorts a candidate by how the model labels its base and its perturbation.
pub fn classify_candidate(model: &Model, cand: &AdversaryCandidate) -> Result<CandidateKind, ModelError> {
    let base = model.predict(cand.base.data())?;
    let perturbed = model.predict(cand.perturbed.data())?;
    Ok(kind_of(cand.base_label, base, perturbed))
}

pub(crate) fn kind_of(label: usize, base_pred: usize, perturbed_pred: usize) -> CandidateKind {
    if base_pred != label {
        CandidateKind::Rejected
    } else if perturbed_pred != label {
        CandidateKind::TrueAdv
    } else {
        CandidateKind::FalseAdv
    }
}

/// A uniformly shuffled visiting order over `n` samples.
pub(crate) fn shuffled_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// One candidate per sample, in RNG-shuffled order.
pub fn gen_adversaries(
    model: &Model,
    data: &LabeledSet,
    epsilon: f64,
    norm: Norm,
    rng: &mut Rng,
) -> Result<Vec<AdversaryCandidate>, ForgeError> {
    const CHUNK: usize = 512;
    let order = shuffled_order(data.len(), rng);
    let mut out = Vec::with_capacity(order.len());
    for rows in order.chunks(CHUNK) {
        let perturbed = fgsm_rows(model, data, rows, epsilon, norm)?;
        for (&i, p) in rows.iter().zip(perturbed) {
            out.push(AdversaryCandidate {
                base: Tensor::vector(data.input(i)),
                base_label: data.labels()[i],
                perturbed: Tensor::vector(&p),
                epsilon,
                norm,
                base_source_id: data.source_ids()[i],
            });
        }
    }
    Ok(out)
}

/// Among correctly classified samples, the fraction whose perturbation is
/// misclassified.
pub fn fooling_rate(model: &Model, data: &LabeledSet, epsilon: f64, norm: Norm) -> Result<f64, ForgeError> {
    const CHUNK: usize = 512;
    if data.is_empty() {
        return Err(ModelError::EmptySet.into());
    }
    let base_preds = model.predict_batch(data.inputs())?;
    let correct: Vec<usize> = (0..data.len())
        .filter(|&i| base_preds[i] == data.labels()[i])
        .collect();
    if correct.is_empty() {
        return Err(ForgeError::NoCorrectBase);
    }
    let mut fooled = 0usize;
    for rows in correct.chunks(CHUNK) {
        let perturbed = fgsm_rows(model, data, rows, epsilon, norm)?;
        let batch = Tensor::from_rows(perturbed.iter().map(|p| p.as_slice())).map_err(ModelError::from)?;
        let preds = model.predict_batch(&batch)?;
        fooled += rows
            .iter()
            .zip(preds)
            .filter(|(&i, p)| *p != data.labels()[i])
            .count();
    }
    Ok(fooled as f64 / correct.len() as f64)
}
