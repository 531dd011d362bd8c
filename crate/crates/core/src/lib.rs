//! Zero-bit watermarking of dense image classifiers by frontier stitching.
//!
//! A watermark key is a balanced set of adversarial inputs built around a
//! trained model's decision frontiers: *true adversaries* that the model
//! misclassifies and *false adversaries* that it still gets right. Fine-tuning
//! the model until every key input carries its base image's label bends the
//! frontiers locally around the key. Ownership of a suspect model is then
//! checked through label-only queries, deciding presence of the mark with an
//! exact binomial test against a coin-flip null model.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, HTTP transport and the command line live in the
//! companion `fstitch` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attack;
pub mod data;
pub mod digest;
pub mod forge;
pub mod key;
mod math;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod stitch;
pub mod svd;
pub mod tensor;
pub mod train;
pub mod verify;

pub use attack::{AttackError, AttackReport, AttackSpec, OverwriteConfig};
pub use data::{DataError, LabeledSet};
pub use digest::{model_digest, ModelDigest};
pub use forge::{AdversaryCandidate, CandidateKind, ForgeError, Norm};
pub use key::{AdvKind, KeyBaseSet, KeyEntry, KeyError, WatermarkKey};
pub use nn::{Activation, DenseLayer, Model, ModelError, ParamGrads};
pub use oracle::{ClassificationOracle, LocalOracle, OracleError};
pub use stitch::{EmbedConfig, Embedding, MarkOutcome, StitchError};
pub use tensor::{Tensor, TensorError};
pub use train::{Optimizer, TrainConfig};
pub use verify::{ExtractionResult, Rational, VerifyError};
