//! Watermark-removal attacks and the robustness bench built on them.

use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::LabeledSet;
use crate::forge::{fgsm_rows, ForgeError, Norm};
use crate::key::WatermarkKey;
use crate::math;
use crate::nn::{DenseLayer, Model, ModelError};
use crate::oracle::LocalOracle;
use crate::rng::{self, derive_seed};
use crate::svd::{svd, SvdError};
use crate::tensor::Tensor;
use crate::train::{fine_tune, Optimizer, TrainConfig};
use crate::verify::{self, VerifyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("rate {0} outside the allowed range")]
    Rate(f64),
    #[error("need {needed} held-out bases, only {available} available")]
    InsufficientBases { needed: usize, available: usize },
    #[error("runs must be at least 1")]
    Runs,
    #[error(transparent)]
    Svd(#[from] SvdError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Number of weights [`prune`] zeroes: `floor(rate * W)`.
pub fn pruned_count(model: &Model, rate: f64) -> usize {
    let w = model.n_weights();
    let count = libm::floor(rate * w as f64) as usize;
    count.min(w)
}

/// Zeroes the `floor(rate * W)` weights of smallest magnitude, ranked across
/// all weight matrices together. Ties go to earlier layers, then lower
/// indices. Biases are left alone.
pub fn prune(model: &Model, rate: f64) -> Result<Model, AttackError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(AttackError::Rate(rate));
    }
    let count = pruned_count(model, rate);
    let mut out = model.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(model.n_weights());
    for (l, layer) in model.layers().iter().enumerate() {
        ranked.extend(layer.weights().data().iter().enumerate().map(|(i, w)| (w.abs(), l, i)));
    }
    // stable sort keeps (layer, index) order among equal magnitudes
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let layers = out.layers_mut();
    for &(_, l, i) in &ranked[..count] {
        layers[l].weights_mut()[i] = 0.0;
    }
    Ok(out)
}

/// Largest rank whose factored storage `r (m + n)` fits in `(1 - rate) m n`,
/// at least 1 and at most `min(m, n)`.
pub fn svd_rank(m: usize, n: usize, rate: f64) -> usize {
    let budget = (1.0 - rate) * (m * n) as f64;
    let r = libm::floor(budget / (m + n) as f64) as usize;
    r.clamp(1, m.min(n))
}

/// Replaces every weight matrix by its best approximation of rank
/// [`svd_rank`]. Biases are untouched.
pub fn svd_compress(model: &Model, rate: f64) -> Result<Model, AttackError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(AttackError::Rate(rate));
    }
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let (m, n) = (layer.fan_in(), layer.fan_out());
        let d = svd(layer.weights().data(), m, n)?;
        let w = d.reconstruct(svd_rank(m, n, rate));
        layers.push(DenseLayer::new(
            Tensor::new(alloc::vec![m, n], w).map_err(ModelError::from)?,
            layer.biases().clone(),
            layer.activation(),
        )?);
    }
    Ok(Model::new(layers)?)
}

/// Fine-tuning schedule for the overwriting attack.
#[derive(Debug, Clone, PartialEq)]
pub struct OverwriteConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for OverwriteConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            learning_rate: base.learning_rate / 10.0,
            epochs: 10,
            batch_size: base.batch_size,
            optimizer: base.optimizer,
        }
    }
}

/// Overwriting attack: perturbs `n_adv` randomly chosen held-out images,
/// labels them with their ground truth and fine-tunes on them.
///
/// Returns the attacked model and the held-out samples that were not used.
pub fn overwrite_split(
    model: &Model,
    heldout: &LabeledSet,
    n_adv: usize,
    epsilon: f64,
    norm: Norm,
    cfg: &OverwriteConfig,
    seed: u64,
) -> Result<(Model, LabeledSet), AttackError> {
    if n_adv > heldout.len() {
        return Err(AttackError::InsufficientBases {
            needed: n_adv,
            available: heldout.len(),
        });
    }
    if n_adv == 0 {
        return Ok((model.clone(), heldout.clone()));
    }
    let mut r = rng::seeded(seed);
    let mut order: Vec<usize> = (0..heldout.len()).collect();
    order.shuffle(&mut r);
    order.truncate(n_adv);
    let (bases, rest) = heldout.split_off(&order);
    let all: Vec<usize> = (0..bases.len()).collect();
    let mut advs = Vec::with_capacity(n_adv);
    for rows in all.chunks(512) {
        advs.extend(fgsm_rows(model, &bases, rows, epsilon, norm)?);
    }
    let inputs = Tensor::from_rows(advs.iter().map(|a| a.as_slice())).map_err(ModelError::from)?;
    let tc = TrainConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        rng_seed: seed,
        optimizer: cfg.optimizer,
    };
    let attacked = fine_tune(model, &inputs, bases.labels(), &tc)?.model;
    Ok((attacked, rest))
}

pub fn overwrite(
    model: &Model,
    heldout: &LabeledSet,
    n_adv: usize,
    epsilon: f64,
    norm: Norm,
    cfg: &OverwriteConfig,
    seed: u64,
) -> Result<Model, AttackError> {
    overwrite_split(model, heldout, n_adv, epsilon, norm, cfg, seed).map(|(m, _)| m)
}

/// Accuracy floor below which an attack defeats its own purpose.
pub const PLAUSIBILITY_FLOOR: f64 = 0.95;

pub fn plausibility(model: &Model, test: &LabeledSet, floor: f64) -> Result<bool, ModelError> {
    Ok(model.evaluate(test)? >= floor)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    Prune { rate: f64 },
    Svd { rate: f64 },
    Overwrite { n_adv: usize, epsilon: f64, norm: Norm },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Prune { .. } => "prune",
            AttackSpec::Svd { .. } => "svd",
            AttackSpec::Overwrite { .. } => "overwrite",
        }
    }

    /// Rate for compression attacks, adversary count for overwriting.
    pub fn parameter(&self) -> f64 {
        match *self {
            AttackSpec::Prune { rate } | AttackSpec::Svd { rate } => rate,
            AttackSpec::Overwrite { n_adv, .. } => n_adv as f64,
        }
    }

    /// Parses `prune:0.25`, `svd:0.5`, `overwrite:1000` or
    /// `overwrite:1000:0.25:linf`.
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split(':');
        let kind = parts.next()?;
        let arg = parts.next()?;
        let spec = match kind {
            "prune" => AttackSpec::Prune { rate: arg.parse().ok()? },
            "svd" => AttackSpec::Svd { rate: arg.parse().ok()? },
            "overwrite" => AttackSpec::Overwrite {
                n_adv: arg.parse().ok()?,
                epsilon: parts.next().map_or(Some(0.25), |e| e.parse().ok())?,
                norm: parts.next().map_or(Some(Norm::Linf), Norm::parse)?,
            },
            _ => return None,
        };
        parts.next().is_none().then_some(spec)
    }
}

/// One row of a robustness table.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub attack_name: String,
    pub parameter: f64,
    /// Mean `m_K` over runs.
    pub key_elements_removed: f64,
    /// Sample standard deviation of `m_K` (0 for a single run).
    pub stdev: f64,
    pub extraction_rate: f64,
    pub accuracy_after: f64,
    pub plausible: bool,
    /// Bench seed the per-run seeds were derived from.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub runs: usize,
    pub seed: u64,
    pub floor: f64,
    pub overwrite: OverwriteConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 1,
            seed: 0,
            floor: PLAUSIBILITY_FLOOR,
            overwrite: OverwriteConfig::default(),
        }
    }
}

/// Seed of run `run` of the attack at position `attack`.
pub fn run_seed(seed: u64, attack: usize, run: usize) -> u64 {
    derive_seed(derive_seed(seed, attack as u64), run as u64)
}

/// Applies one attack and measures extraction and accuracy afterwards.
pub fn attacked_extraction(
    model_w: &Model,
    key: &WatermarkKey,
    test: &LabeledSet,
    spec: &AttackSpec,
    cfg: &OverwriteConfig,
    seed: u64,
) -> Result<(verify::ExtractionResult, f64), AttackError> {
    let (attacked, eval_set) = match *spec {
        AttackSpec::Prune { rate } => (prune(model_w, rate)?, None),
        AttackSpec::Svd { rate } => (svd_compress(model_w, rate)?, None),
        AttackSpec::Overwrite { n_adv, epsilon, norm } => {
            let (m, rest) = overwrite_split(model_w, test, n_adv, epsilon, norm, cfg, seed)?;
            (m, Some(rest))
        }
    };
    let result = verify::extract(&mut LocalOracle::new(&attacked), key)?;
    let accuracy = attacked.evaluate(eval_set.as_ref().unwrap_or(test))?;
    Ok((result, accuracy))
}

/// Runs every attack `cfg.runs` times against the marked model and
/// aggregates extraction outcomes. A failing attack yields an error in its
/// own row; the other rows still run.
pub fn robustness_table(
    model_w: &Model,
    key: &WatermarkKey,
    test: &LabeledSet,
    attacks: &[AttackSpec],
    cfg: &BenchConfig,
) -> Vec<Result<AttackReport, AttackError>> {
    attacks
        .iter()
        .enumerate()
        .map(|(a, spec)| {
            if cfg.runs == 0 {
                return Err(AttackError::Runs);
            }
            let mut removed = Vec::with_capacity(cfg.runs);
            let mut successes = 0usize;
            let mut acc_total = 0.0;
            for run in 0..cfg.runs {
                let seed = run_seed(cfg.seed, a, run);
                let (res, acc) = attacked_extraction(model_w, key, test, spec, &cfg.overwrite, seed)?;
                removed.push(res.mismatches as f64);
                successes += res.success as usize;
                acc_total += acc;
            }
            let (mean, stdev) = mean_stdev(&removed);
            let accuracy_after = acc_total / cfg.runs as f64;
            Ok(AttackReport {
                attack_name: String::from(spec.name()),
                parameter: spec.parameter(),
                key_elements_removed: mean,
                stdev,
                extraction_rate: successes as f64 / cfg.runs as f64,
                accuracy_after,
                plausible: accuracy_after >= cfg.floor,
                seed: cfg.seed,
            })
        })
        .collect()
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var))
}
