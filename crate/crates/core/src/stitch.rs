//! Key construction and embedding: pick balanced true/false adversaries
//! around the model's frontiers, then fine-tune until every key input is
//! classified as its base image's label.

use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

use crate::data::LabeledSet;
use crate::digest::model_digest;
use crate::forge::{fgsm_rows, kind_of, shuffled_order, CandidateKind, ForgeError, Norm};
use crate::key::{AdvKind, KeyBaseSet, KeyEntry, KeyError, WatermarkKey};
use crate::nn::{Model, ModelError};
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;
use crate::train::{Optimizer, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StitchError {
    #[error("key length must be even and at least 2, got {0}")]
    KeyLength(usize),
    #[error("empty sample set")]
    EmptySet,
    #[error(
        "candidate pool exhausted: {true_found}/{needed} true and {false_found}/{needed} false adversaries; \
         {short} half is short, try {hint} epsilon or a larger base set"
    )]
    KeyGeneration {
        needed: usize,
        true_found: usize,
        false_found: usize,
        short: &'static str,
        hint: &'static str,
    },
    #[error("key not embedded within {budget} epochs ({remaining} entries still misclassified)")]
    EmbedBudgetExceeded { budget: usize, remaining: usize },
    #[error("all {} marking attempts failed", attempts.len())]
    PipelineExhausted { attempts: Vec<AttemptDiagnostics> },
    #[error("invalid embedding configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Key(#[from] KeyError),
}

/// What to build a key from.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyParams {
    pub key_len: usize,
    pub epsilon: f64,
    pub norm: Norm,
    pub seed: u64,
    pub base_set: KeyBaseSet,
}

impl Default for KeyParams {
    fn default() -> Self {
        Self {
            key_len: 100,
            epsilon: 0.25,
            norm: Norm::Linf,
            seed: 0,
            base_set: KeyBaseSet::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    pub epoch_budget: usize,
    pub finetune_lr: f64,
    pub rng_seed: u64,
    pub max_key_retries: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            epoch_budget: 100,
            finetune_lr: base.learning_rate / 10.0,
            rng_seed: 0,
            max_key_retries: 5,
            batch_size: base.batch_size,
            optimizer: base.optimizer,
        }
    }
}

impl EmbedConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.finetune_lr,
            batch_size: self.batch_size,
            epochs: self.epoch_budget,
            rng_seed: self.rng_seed,
            optimizer: self.optimizer,
        }
    }
}

/// Builds a key of `key_len / 2` true and `key_len / 2` false adversaries.
///
/// Candidates are visited in a seeded shuffled order and taken without
/// replacement; each entry keeps its base image's ground-truth label.
pub fn build_key(model: &Model, data: &LabeledSet, params: &KeyParams) -> Result<WatermarkKey, StitchError> {
    const CHUNK: usize = 256;
    let key_len = params.key_len;
    if key_len < 2 || !key_len.is_multiple_of(2) {
        return Err(StitchError::KeyLength(key_len));
    }
    if data.is_empty() {
        return Err(StitchError::EmptySet);
    }
    let half = key_len / 2;
    let mut rng = rng::seeded(params.seed);
    let order = shuffled_order(data.len(), &mut rng);
    let mut entries = Vec::with_capacity(key_len);
    let (mut n_true, mut n_false) = (0, 0);

    'scan: for rows in order.chunks(CHUNK) {
        let perturbed = fgsm_rows(model, data, rows, params.epsilon, params.norm)?;
        let bases = data.subset(rows);
        let base_preds = model.predict_batch(bases.inputs())?;
        let adv_batch = Tensor::from_rows(perturbed.iter().map(|p| p.as_slice()))
            .map_err(ModelError::from)?;
        let adv_preds = model.predict_batch(&adv_batch)?;
        for (j, &i) in rows.iter().enumerate() {
            let label = data.labels()[i];
            let kind = match kind_of(label, base_preds[j], adv_preds[j]) {
                CandidateKind::TrueAdv if n_true < half => {
                    n_true += 1;
                    AdvKind::TrueAdv
                }
                CandidateKind::FalseAdv if n_false < half => {
                    n_false += 1;
                    AdvKind::FalseAdv
                }
                _ => continue,
            };
            entries.push(KeyEntry {
                input: Tensor::vector(&perturbed[j]),
                label,
                kind,
                base_source_id: data.source_ids()[i],
            });
            if n_true == half && n_false == half {
                break 'scan;
            }
        }
    }

    if n_true < half || n_false < half {
        let (short, hint) = if n_true < half {
            ("true-adversary", "a larger")
        } else {
            ("false-adversary", "a smaller")
        };
        return Err(StitchError::KeyGeneration {
            needed: half,
            true_found: n_true,
            false_found: n_false,
            short,
            hint,
        });
    }
    Ok(WatermarkKey::new(
        entries,
        params.epsilon,
        params.norm,
        model_digest(model),
        params.seed,
        params.base_set,
    )?)
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub model: Model,
    /// Fine-tuning epochs run; 0 if the key was already satisfied.
    pub epochs: usize,
}

fn misclassified(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<usize, ModelError> {
    let preds = model.predict_batch(inputs)?;
    Ok(preds.iter().zip(labels).filter(|(p, y)| p != y).count())
}

/// Fine-tunes on the key alone until every key input gets its label.
///
/// Correctness is checked before the first epoch and after each one.
pub fn embed(model: &Model, key: &WatermarkKey, cfg: &EmbedConfig) -> Result<Embedding, StitchError> {
    if cfg.epoch_budget == 0 {
        return Err(StitchError::Config("epoch budget must be at least 1"));
    }
    if key.is_empty() {
        return Err(StitchError::Key(KeyError::Empty));
    }
    if key.model_digest != model_digest(model) {
        log::warn!(
            "key was built for model {} but is being embedded into {}",
            key.model_digest.short(),
            model_digest(model).short()
        );
    }
    let inputs = key.inputs();
    let labels = key.labels();
    if misclassified(model, &inputs, &labels)? == 0 {
        return Ok(Embedding {
            model: model.clone(),
            epochs: 0,
        });
    }
    let mut marked = model.clone();
    let mut trainer = Trainer::new(cfg.train_config(), &marked)?;
    let mut remaining = labels.len();
    for epoch in 1..=cfg.epoch_budget {
        trainer.epoch(&mut marked, &inputs, &labels)?;
        remaining = misclassified(&marked, &inputs, &labels)?;
        if remaining == 0 {
            return Ok(Embedding {
                model: marked,
                epochs: epoch,
            });
        }
    }
    Err(StitchError::EmbedBudgetExceeded {
        budget: cfg.epoch_budget,
        remaining,
    })
}

/// How one marking attempt went.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptDiagnostics {
    pub key_seed: u64,
    pub outcome: String,
}

#[derive(Debug, Clone)]
pub struct MarkOutcome {
    pub model: Model,
    pub key: WatermarkKey,
    pub epochs: usize,
    /// Every attempt made, the successful one last.
    pub attempts: Vec<AttemptDiagnostics>,
}

/// Key seed for attempt `i`: the configured seed first, then derived ones.
pub fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        seed
    } else {
        derive_seed(seed, attempt as u64)
    }
}

/// Builds and embeds keys until one embeds within budget, at most
/// `max_key_retries` times. Only budget overruns are retried.
pub fn mark_pipeline(
    model: &Model,
    data: &LabeledSet,
    params: &KeyParams,
    cfg: &EmbedConfig,
) -> Result<MarkOutcome, StitchError> {
    let tries = cfg.max_key_retries.max(1);
    let mut attempts = Vec::with_capacity(tries);
    for attempt in 0..tries {
        let key_seed = attempt_seed(params.seed, attempt);
        let key = build_key(
            model,
            data,
            &KeyParams {
                seed: key_seed,
                ..params.clone()
            },
        )?;
        match embed(model, &key, cfg) {
            Ok(emb) => {
                attempts.push(AttemptDiagnostics {
                    key_seed,
                    outcome: alloc::format!("embedded in {} epochs", emb.epochs),
                });
                return Ok(MarkOutcome {
                    model: emb.model,
                    key,
                    epochs: emb.epochs,
                    attempts,
                });
            }
            Err(e @ StitchError::EmbedBudgetExceeded { .. }) => {
                log::info!("marking attempt {} failed: {}", attempt + 1, e);
                attempts.push(AttemptDiagnostics {
                    key_seed,
                    outcome: alloc::format!("{e}"),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Err(StitchError::PipelineExhausted { attempts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify;
    use crate::LocalOracle;

    /// Two well separated blobs in 4-d, labels 0 and 1.
    fn blobs(n: usize, seed: u64) -> LabeledSet {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 0 { 0.3 } else { 0.7 };
            for _ in 0..4 {
                data.push(centre + r.random_range(-0.1..0.1f64));
            }
            labels.push(y);
        }
        LabeledSet::with_positions(Tensor::new(vec![n, 4], data).unwrap(), labels).unwrap()
    }

    fn trained(seed: u64) -> (Model, LabeledSet) {
        let data = blobs(200, seed);
        let m = Model::mlp(4, &[16], 2, seed).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 60,
            batch_size: 16,
            ..TrainConfig::default()
        };
        (crate::train::train(&m, &data, &cfg).unwrap().model, data)
    }

    fn params(key_len: usize, epsilon: f64) -> KeyParams {
        KeyParams {
            key_len,
            epsilon,
            norm: Norm::Linf,
            seed: 5,
            base_set: KeyBaseSet::Other,
        }
    }

    #[test]
    fn key_is_balanced_and_deterministic() {
        let (m, data) = trained(1);
        let key = build_key(&m, &data, &params(4, 0.2)).unwrap();
        assert_eq!(key.count(AdvKind::TrueAdv), 2);
        assert_eq!(key.count(AdvKind::FalseAdv), 2);
        assert_eq!(key.model_digest, model_digest(&m));
        for e in key.entries() {
            assert_eq!(e.label, data.labels()[e.base_source_id as usize]);
            let pred = m.predict(e.input.data()).unwrap();
            match e.kind {
                AdvKind::TrueAdv => assert_ne!(pred, e.label),
                AdvKind::FalseAdv => assert_eq!(pred, e.label),
            }
        }
        assert_eq!(key, build_key(&m, &data, &params(4, 0.2)).unwrap());
        let mut ids: Vec<u64> = key.entries().iter().map(|e| e.base_source_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn tiny_epsilon_cannot_fill_true_half() {
        let (m, data) = trained(2);
        match build_key(&m, &data, &params(4, 1e-9)) {
            Err(StitchError::KeyGeneration { short, .. }) => assert_eq!(short, "true-adversary"),
            other => panic!("expected key generation error, got {other:?}"),
        }
        assert!(matches!(
            build_key(&m, &data, &params(3, 0.2)),
            Err(StitchError::KeyLength(3))
        ));
    }

    #[test]
    fn embed_then_extract_is_perfect() {
        let (m, data) = trained(3);
        let key = build_key(&m, &data, &params(10, 0.25)).unwrap();
        let cfg = EmbedConfig {
            finetune_lr: 0.01,
            epoch_budget: 2000,
            ..EmbedConfig::default()
        };
        let emb = embed(&m, &key, &cfg).unwrap();
        assert!(emb.epochs >= 1);
        let r = verify::extract(&mut LocalOracle::new(&emb.model), &key).unwrap();
        assert_eq!(r.mismatches, 0);
        assert!(r.success);
        assert_eq!(r.queries_used, 10);
    }

    #[test]
    fn satisfied_key_needs_no_epochs() {
        let (m, data) = trained(4);
        let key = build_key(&m, &data, &params(4, 0.2)).unwrap();
        // Only false adversaries (still correct) would be satisfied as-is;
        // relabel the true ones with the model's own answers.
        let entries = key
            .entries()
            .iter()
            .cloned()
            .map(|mut e| {
                e.label = m.predict(e.input.data()).unwrap();
                e
            })
            .collect();
        let easy = WatermarkKey::new(entries, 0.2, Norm::Linf, key.model_digest, 0, KeyBaseSet::Other).unwrap();
        let emb = embed(&m, &easy, &EmbedConfig::default()).unwrap();
        assert_eq!(emb.epochs, 0);
        assert_eq!(emb.model, m);
    }

    #[test]
    fn pipeline_retries_then_gives_up() {
        let (m, data) = trained(5);
        let cfg = EmbedConfig {
            epoch_budget: 1,
            finetune_lr: 1e-12,
            max_key_retries: 3,
            ..EmbedConfig::default()
        };
        match mark_pipeline(&m, &data, &params(6, 0.2), &cfg) {
            Err(StitchError::PipelineExhausted { attempts }) => {
                assert_eq!(attempts.len(), 3);
                assert_eq!(attempts[0].key_seed, 5);
                assert_ne!(attempts[1].key_seed, attempts[2].key_seed);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn pipeline_first_attempt_success() {
        let (m, data) = trained(6);
        let cfg = EmbedConfig {
            finetune_lr: 0.01,
            epoch_budget: 2000,
            ..EmbedConfig::default()
        };
        let out = mark_pipeline(&m, &data, &params(6, 0.2), &cfg).unwrap();
        assert_eq!(out.attempts.len(), 1);
        assert_eq!(out.key, build_key(&m, &data, &params(6, 0.2)).unwrap());
        let again = mark_pipeline(&m, &data, &params(6, 0.2), &cfg).unwrap();
        assert_eq!(again.model, out.model);
    }

    #[test]
    fn digest_mismatch_only_warns() {
        let (m, data) = trained(7);
        let key = build_key(&m, &data, &params(4, 0.2)).unwrap();
        let (other, _) = trained(8);
        let cfg = EmbedConfig {
            finetune_lr: 0.001,
            epoch_budget: 2000,
            ..EmbedConfig::default()
        };
        assert!(embed(&other, &key, &cfg).is_ok());
    }
}
