//! Label-only classification services.

use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("request rejected: {0}")]
    Rejected(String),
}

/// Anything that answers a batch of inputs with one label each.
///
/// `queries_used` counts individual inputs, not calls, and only grows.
pub trait ClassificationOracle {
    fn classify(&mut self, inputs: &Tensor) -> Result<Vec<usize>, OracleError>;
    fn queries_used(&self) -> u64;
}

/// Adapter answering from an in-process model.
#[derive(Debug, Clone)]
pub struct LocalOracle<'a> {
    model: &'a Model,
    queries: u64,
}

impl<'a> LocalOracle<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model, queries: 0 }
    }
}

impl ClassificationOracle for LocalOracle<'_> {
    fn classify(&mut self, inputs: &Tensor) -> Result<Vec<usize>, OracleError> {
        let labels = self
            .model
            .predict_batch(inputs)
            .map_err(|e| OracleError::Rejected(alloc::format!("{e}")))?;
        self.queries += labels.len() as u64;
        Ok(labels)
    }

    fn queries_used(&self) -> u64 {
        self.queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_oracle_counts_inputs() {
        let m = Model::mlp(3, &[4], 2, 0).unwrap();
        let mut o = LocalOracle::new(&m);
        let x = Tensor::new(vec![5, 3], alloc::vec![0.5; 15]).unwrap();
        assert_eq!(o.classify(&x).unwrap().len(), 5);
        o.classify(&x).unwrap();
        assert_eq!(o.queries_used(), 10);
        let bad = Tensor::new(alloc::vec![1, 2], alloc::vec![0.0; 2]).unwrap();
        assert!(o.classify(&bad).is_err());
        assert_eq!(o.queries_used(), 10);
    }
}
