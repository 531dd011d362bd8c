//! Labeled sample sets that remember where each sample came from.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::key::WatermarkKey;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("{inputs} inputs but {labels} labels and {ids} source ids")]
    LengthMismatch { inputs: usize, labels: usize, ids: usize },
    #[error("pixel {value} at flat index {index} outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error("duplicate source id {0}")]
    DuplicateSource(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Inputs in `[0, 1]`, their labels, and each sample's position in the file
/// it was read from. Source ids survive subsetting and shuffling so samples
/// used to build a key can be traced and excluded later.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    inputs: Tensor,
    labels: Vec<usize>,
    source_ids: Vec<u64>,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>, source_ids: Vec<u64>) -> Result<Self, DataError> {
        let n = inputs.rows();
        if labels.len() != n || source_ids.len() != n {
            return Err(DataError::LengthMismatch {
                inputs: n,
                labels: labels.len(),
                ids: source_ids.len(),
            });
        }
        if let Some((index, &value)) = inputs
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelRange { index, value });
        }
        let mut seen = BTreeSet::new();
        for &id in &source_ids {
            if !seen.insert(id) {
                return Err(DataError::DuplicateSource(id));
            }
        }
        Ok(Self {
            inputs,
            labels,
            source_ids,
        })
    }

    /// Source ids default to positions `0..N`.
    pub fn with_positions(inputs: Tensor, labels: Vec<usize>) -> Result<Self, DataError> {
        let ids = (0..labels.len() as u64).collect();
        Self::new(inputs, labels, ids)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            inputs: Tensor::from_parts_unchecked(vec![0, dim], Vec::new()),
            labels: Vec::new(),
            source_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source_ids(&self) -> &[u64] {
        &self.source_ids
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Samples at the given positions, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let inputs = if indices.is_empty() {
            Tensor::from_parts_unchecked(vec![0, self.dim()], Vec::new())
        } else {
            self.inputs.select_rows(indices).expect("indices in range")
        };
        Self {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            source_ids: indices.iter().map(|&i| self.source_ids[i]).collect(),
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Drops every sample whose source id is in `ids`, preserving order.
    pub fn without_sources(&self, ids: &BTreeSet<u64>) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| !ids.contains(&self.source_ids[i]))
            .collect();
        self.subset(&keep)
    }

    /// Removes the base images a key was crafted from.
    pub fn remove_key_bases(&self, key: &WatermarkKey) -> Self {
        let ids: BTreeSet<u64> = key.entries().iter().map(|e| e.base_source_id).collect();
        self.without_sources(&ids)
    }

    /// Splits into (the listed samples, everything else), both in original order.
    pub fn split_off(&self, indices: &[usize]) -> (Self, Self) {
        let chosen: BTreeSet<usize> = indices.iter().copied().collect();
        let rest: Vec<usize> = (0..self.len()).filter(|i| !chosen.contains(i)).collect();
        (self.subset(indices), self.subset(&rest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(n: usize) -> LabeledSet {
        let data = (0..n * 2).map(|i| (i % 7) as f64 / 7.0).collect();
        LabeledSet::with_positions(
            Tensor::new(vec![n, 2], data).unwrap(),
            (0..n).map(|i| i % 3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn validates_lengths_range_and_ids() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        assert!(LabeledSet::new(t.clone(), vec![0], vec![0, 1]).is_err());
        assert!(matches!(
            LabeledSet::new(t.clone(), vec![0, 1], vec![3, 3]),
            Err(DataError::DuplicateSource(3))
        ));
        let bad = Tensor::new(vec![1, 2], vec![0.0, 1.5]).unwrap();
        assert!(matches!(
            LabeledSet::with_positions(bad, vec![0]),
            Err(DataError::PixelRange { index: 1, .. })
        ));
    }

    #[test]
    fn without_sources_keeps_order_and_is_idempotent() {
        let s = toy_set(10);
        let ids: BTreeSet<u64> = [2, 7].into_iter().collect();
        let r = s.without_sources(&ids);
        assert_eq!(r.len(), 8);
        assert_eq!(r.source_ids(), &[0, 1, 3, 4, 5, 6, 8, 9]);
        assert_eq!(r.input(2), s.input(3));
        assert_eq!(r.without_sources(&ids), r);

        let none: BTreeSet<u64> = [100].into_iter().collect();
        assert_eq!(s.without_sources(&none), s);
        let all: BTreeSet<u64> = (0..10).collect();
        assert!(s.without_sources(&all).is_empty());
    }

    #[test]
    fn split_off_partitions() {
        let s = toy_set(6);
        let (a, b) = s.split_off(&[4, 1]);
        assert_eq!(a.source_ids(), &[4, 1]);
        assert_eq!(b.source_ids(), &[0, 2, 3, 5]);
    }
}
