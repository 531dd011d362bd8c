//! Watermark extraction against a label-only oracle, and the exact binomial
//! decision rule behind it.
//!
//! Under the null model every key query matches the recorded label with
//! probability 1/2, so the mismatch count `Z` follows `B(|K|, 1/2)`.
//! Extraction succeeds when `m_K < theta`, where `theta` is chosen so that a
//! null responder reaches `m_K <= theta - 1` with probability below `alpha`.
//! Every comparison on that path is done in integers.

use alloc::string::String;
use alloc::vec::Vec;
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng as _;
use thiserror::Error;

use crate::data::LabeledSet;
use crate::key::WatermarkKey;
use crate::nn::{Model, ModelError};
use crate::oracle::{ClassificationOracle, OracleError};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("answer vector has {answers} labels but the key has {expected}")]
    LengthMismatch { answers: usize, expected: usize },
    #[error("tail bound {t} outside [0, {n}]")]
    TailRange { n: u64, t: u64 },
    #[error("key is empty")]
    EmptyKey,
    #[error("oracle failed after {queries_used} queries")]
    Transport {
        queries_used: u64,
        #[source]
        source: OracleError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A non-negative fraction with small integer terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

impl Rational {
    /// The default significance level, 1/20.
    pub const ALPHA: Rational = Rational { num: 1, den: 20 };

    pub const fn new(num: u64, den: u64) -> Self {
        assert!(den > 0);
        Self { num, den }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// An exact probability of the form `numerator / 2^exponent`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DyadicProbability {
    pub numerator: BigUint,
    pub exponent: u32,
}

impl DyadicProbability {
    /// `self < r`, decided in integers.
    pub fn lt(&self, r: Rational) -> bool {
        &self.numerator * BigUint::from(r.den) < BigUint::from(r.num) << self.exponent as usize
    }

    pub fn to_f64(&self) -> f64 {
        // Shift both terms down together so huge exponents stay representable.
        let shift = self.exponent.saturating_sub(1000);
        let num = (&self.numerator >> shift as usize).to_f64().unwrap_or(f64::INFINITY);
        let mut v = num;
        for _ in 0..(self.exponent - shift) {
            v *= 0.5;
        }
        v
    }

    /// Exact terminating decimal expansion, e.g. `0.020694732666015625`.
    pub fn to_decimal_string(&self) -> String {
        // a / 2^e = a * 5^e / 10^e
        let scaled = &self.numerator * BigUint::from(5u32).pow(self.exponent);
        let digits = scaled.to_str_radix(10);
        let e = self.exponent as usize;
        let (int_part, frac_part) = if digits.len() > e {
            let split = digits.len() - e;
            (String::from(&digits[..split]), String::from(&digits[split..]))
        } else {
            let mut frac = String::new();
            for _ in 0..(e - digits.len()) {
                frac.push('0');
            }
            frac.push_str(&digits);
            (String::from("0"), frac)
        };
        let frac = frac_part.trim_end_matches('0');
        if frac.is_empty() {
            int_part
        } else {
            let mut s = int_part;
            s.push('.');
            s.push_str(frac);
            s
        }
    }
}

/// Number of positions where the queried labels differ from the key's.
pub fn matching_distance(answers: &[usize], key_labels: &[usize]) -> Result<usize, VerifyError> {
    if answers.len() != key_labels.len() {
        return Err(VerifyError::LengthMismatch {
            answers: answers.len(),
            expected: key_labels.len(),
        });
    }
    Ok(answers.iter().zip(key_labels).filter(|(a, b)| a != b).count())
}

/// `P[Z <= t]` for `Z ~ B(n, 1/2)`, exactly.
pub fn binomial_tail(n: u64, t: u64) -> Result<DyadicProbability, VerifyError> {
    if t > n {
        return Err(VerifyError::TailRange { n, t });
    }
    let mut coeff = BigUint::one();
    let mut sum = BigUint::zero();
    for z in 0..=t {
        if z > 0 {
            coeff = coeff * BigUint::from(n - z + 1) / BigUint::from(z);
        }
        sum += &coeff;
    }
    Ok(DyadicProbability {
        numerator: sum,
        exponent: n as u32,
    })
}

/// Verdict threshold: extraction succeeds iff `m_K < theta`.
///
/// `theta = 1 + max{t : P[Z <= t] < alpha}`, or 0 when even `P[Z = 0]`
/// reaches `alpha` (such a key can never verify).
pub fn theta_at(key_size: u64, alpha: Rational) -> u64 {
    let mut coeff = BigUint::one();
    let mut sum = BigUint::zero();
    let bound = BigUint::from(alpha.num) << key_size as usize;
    let den = BigUint::from(alpha.den);
    let mut theta = 0;
    for t in 0..=key_size {
        if t > 0 {
            coeff = coeff * BigUint::from(key_size - t + 1) / BigUint::from(t);
        }
        sum += &coeff;
        if &sum * &den < bound {
            theta = t + 1;
        } else {
            break;
        }
    }
    theta
}

/// [`theta_at`] with `alpha = 1/20`.
pub fn theta(key_size: u64) -> u64 {
    theta_at(key_size, Rational::ALPHA)
}

/// The single decision rule shared by extraction and the attack bench.
pub fn extraction_succeeds(mismatches: usize, key_size: usize) -> bool {
    (mismatches as u64) < theta(key_size as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionResult {
    /// `m_K`: key entries the oracle labeled differently from the key.
    pub mismatches: usize,
    pub key_size: usize,
    pub theta: u64,
    /// `P[Z <= m_K]` under the null model, exact decimal.
    pub p_value: String,
    pub p_value_f64: f64,
    pub success: bool,
    pub queries_used: u64,
}

impl ExtractionResult {
    pub fn from_answers(answers: &[usize], key_labels: &[usize], queries_used: u64) -> Result<Self, VerifyError> {
        let mismatches = matching_distance(answers, key_labels)?;
        let n = key_labels.len() as u64;
        let p = binomial_tail(n, mismatches as u64)?;
        let theta = theta(n);
        Ok(Self {
            mismatches,
            key_size: key_labels.len(),
            theta,
            p_value: p.to_decimal_string(),
            p_value_f64: p.to_f64(),
            success: (mismatches as u64) < theta,
            queries_used,
        })
    }
}

/// Queries the oracle once per key entry and decides whether the watermark
/// is present. No verdict is produced on partial answers.
pub fn extract<O: ClassificationOracle + ?Sized>(oracle: &mut O, key: &WatermarkKey) -> Result<ExtractionResult, VerifyError> {
    if key.is_empty() {
        return Err(VerifyError::EmptyKey);
    }
    let before = oracle.queries_used();
    let answers = oracle.classify(&key.inputs()).map_err(|source| VerifyError::Transport {
        queries_used: oracle.queries_used() - before,
        source,
    })?;
    let used = oracle.queries_used() - before;
    if answers.len() != key.len() {
        return Err(VerifyError::Transport {
            queries_used: used,
            source: OracleError::Malformed(alloc::format!(
                "{} answers for {} queries",
                answers.len(),
                key.len()
            )),
        });
    }
    ExtractionResult::from_answers(&answers, &key.labels(), used)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoyaltyReport {
    pub acc_before: f64,
    pub acc_after: f64,
    /// Accuracy lost by marking: `acc_before - acc_after`.
    pub delta: f64,
}

/// Accuracy of both models on the same (key-base-free) test set.
pub fn loyalty_report(original: &Model, marked: &Model, test: &LabeledSet) -> Result<LoyaltyReport, ModelError> {
    let acc_before = original.evaluate(test)?;
    let acc_after = marked.evaluate(test)?;
    Ok(LoyaltyReport {
        acc_before,
        acc_after,
        delta: acc_before - acc_after,
    })
}

/// Per-query match probability of a null responder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NullModelSpec {
    pub match_probability: Rational,
}

impl NullModelSpec {
    /// The coin-flip null of the decision rule.
    pub const COIN: NullModelSpec = NullModelSpec {
        match_probability: Rational { num: 1, den: 2 },
    };

    /// A responder answering uniformly over `n_classes`.
    pub fn uniform(n_classes: u64) -> Self {
        Self {
            match_probability: Rational::new(1, n_classes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullSimulation {
    pub success_rate: f64,
    pub mean_matches: f64,
    pub theta: u64,
}

/// Simulates a responder answering uniformly at random over `n_classes`
/// against a random fixed key labeling, and reports how often the decision
/// rule would (falsely) declare the watermark present.
pub fn null_simulation(key_size: usize, n_classes: usize, trials: usize, rng: &mut Rng) -> NullSimulation {
    assert!(n_classes >= 2 && trials >= 1);
    let key_labels: Vec<usize> = (0..key_size).map(|_| rng.random_range(0..n_classes)).collect();
    let theta = theta(key_size as u64);
    let mut successes = 0usize;
    let mut matches_total = 0usize;
    let mut answers = Vec::with_capacity(key_size);
    for _ in 0..trials {
        answers.clear();
        answers.extend((0..key_size).map(|_| rng.random_range(0..n_classes)));
        let mismatches = matching_distance(&answers, &key_labels).expect("equal lengths");
        matches_total += key_size - mismatches;
        if (mismatches as u64) < theta {
            successes += 1;
        }
    }
    NullSimulation {
        success_rate: successes as f64 / trials as f64,
        mean_matches: matches_total as f64 / trials as f64,
        theta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn matching_distance_examples() {
        assert_eq!(matching_distance(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0);
        let a: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let b: Vec<usize> = (0..20).map(|i| (i + 1) % 10).collect();
        assert_eq!(matching_distance(&a, &b).unwrap(), 20);
        assert_eq!(matching_distance(&[1, 2, 3, 4], &[1, 9, 3, 9]).unwrap(), 2);
        assert!(matching_distance(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn tail_values_at_twenty() {
        let t5 = binomial_tail(20, 5).unwrap();
        assert_eq!(t5.numerator, BigUint::from(21700u32));
        assert_eq!(t5.exponent, 20);
        assert_eq!(t5.to_decimal_string(), "0.020694732666015625");
        let t6 = binomial_tail(20, 6).unwrap();
        assert_eq!(t6.numerator, BigUint::from(60460u32));
        assert!((t6.to_f64() - 0.057_659).abs() < 1e-6);
        assert_eq!(binomial_tail(37, 37).unwrap().to_decimal_string(), "1");
        assert!(binomial_tail(5, 6).is_err());
    }

    #[test]
    fn theta_values() {
        assert_eq!(theta(100), 42);
        assert_eq!(theta(20), 6);
        assert_eq!(theta(4), 0);
        assert_eq!(theta(5), 1);
        assert_eq!(theta(1), 0);
    }

    #[test]
    fn dyadic_comparison_and_huge_exponents() {
        let p = DyadicProbability {
            numerator: BigUint::from(1u32),
            exponent: 1,
        };
        assert!(!p.lt(Rational::new(1, 2)));
        assert!(p.lt(Rational::new(51, 100)));
        let tiny = binomial_tail(2000, 0).unwrap();
        assert_eq!(tiny.to_f64(), 0.0);
        let half = binomial_tail(2001, 1000).unwrap();
        assert!((half.to_f64() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn verdict_boundary_at_twenty() {
        let labels = [3usize; 20];
        let mut answers = labels;
        for a in answers.iter_mut().take(5) {
            *a = 4;
        }
        assert!(ExtractionResult::from_answers(&answers, &labels, 20).unwrap().success);
        answers[5] = 4;
        let r = ExtractionResult::from_answers(&answers, &labels, 20).unwrap();
        assert!(!r.success);
        assert_eq!(r.mismatches, 6);
        assert_eq!(r.p_value, "0.0576591491699218750".trim_end_matches('0'));
    }

    #[test]
    fn null_simulation_single_trial() {
        let mut r = rng::seeded(3);
        let s = null_simulation(20, 10, 1, &mut r);
        assert!(s.success_rate == 0.0 || s.success_rate == 1.0);
    }
}
