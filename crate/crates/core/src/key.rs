//! The secret watermark key: crafted inputs and the labels they must keep.

use alloc::vec::Vec;
use thiserror::Error;

use crate::digest::ModelDigest;
use crate::forge::Norm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdvKind {
    /// Perturbed across the frontier: the unmarked model gets it wrong.
    TrueAdv,
    /// Perturbed toward the frontier but still classified correctly.
    FalseAdv,
}

/// Which pool the key's base images were drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyBaseSet {
    Test,
    Train,
    Other,
}

impl KeyBaseSet {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyBaseSet::Test => "test",
            KeyBaseSet::Train => "train",
            KeyBaseSet::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "test" => Some(KeyBaseSet::Test),
            "train" => Some(KeyBaseSet::Train),
            "other" => Some(KeyBaseSet::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyEntry {
    pub input: Tensor,
    /// Ground-truth label of the base image.
    pub label: usize,
    pub kind: AdvKind,
    pub base_source_id: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KeyError {
    #[error("key has no entries")]
    Empty,
    #[error("key must hold as many true as false adversaries ({true_adv} vs {false_adv})")]
    Unbalanced { true_adv: usize, false_adv: usize },
    #[error("entry {0} has a pixel outside [0, 1]")]
    PixelRange(usize),
    #[error("entry {index} has dimension {actual}, expected {expected}")]
    Dimension { index: usize, expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKey {
    entries: Vec<KeyEntry>,
    pub epsilon: f64,
    pub norm: Norm,
    pub model_digest: ModelDigest,
    pub rng_seed: u64,
    pub base_set: KeyBaseSet,
}

impl WatermarkKey {
    pub fn new(
        entries: Vec<KeyEntry>,
        epsilon: f64,
        norm: Norm,
        model_digest: ModelDigest,
        rng_seed: u64,
        base_set: KeyBaseSet,
    ) -> Result<Self, KeyError> {
        let first = entries.first().ok_or(KeyError::Empty)?;
        let dim = first.input.len();
        let true_adv = entries.iter().filter(|e| e.kind == AdvKind::TrueAdv).count();
        let false_adv = entries.len() - true_adv;
        if true_adv != false_adv {
            return Err(KeyError::Unbalanced { true_adv, false_adv });
        }
        for (index, e) in entries.iter().enumerate() {
            if e.input.len() != dim {
                return Err(KeyError::Dimension {
                    index,
                    expected: dim,
                    actual: e.input.len(),
                });
            }
            if e.input.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(KeyError::PixelRange(index));
            }
        }
        Ok(Self {
            entries,
            epsilon,
            norm,
            model_digest,
            rng_seed,
            base_set,
        })
    }

    pub fn entries(&self) -> &[KeyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.entries[0].input.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// All key inputs stacked into a `|K| x d` batch.
    pub fn inputs(&self) -> Tensor {
        Tensor::from_rows(self.entries.iter().map(|e| e.input.data())).expect("uniform key dims")
    }

    pub fn count(&self, kind: AdvKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }
}
