//! Sub-claim score aggregation and the final verdict rule.

use serde::{Deserialize, Serialize};

use crate::model::Label;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregateError {
    #[error("no scores to aggregate")]
    EmptyScores,
    #[error("invalid aggregator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    HarmonicMean,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned", default)]
pub struct AggregatorConfig<T: Scalar> {
    pub method: AggregationMethod,
    pub threshold: T,
    pub epsilon: T,
}

impl<T: Scalar> Default for AggregatorConfig<T> {
    fn default() -> Self {
        AggregatorConfig {
            method: AggregationMethod::HarmonicMean,
            threshold: T::from_f64(0.5).unwrap(),
            epsilon: T::from_f64(1e-6).unwrap(),
        }
    }
}

impl<T: Scalar> AggregatorConfig<T> {
    pub fn validate(&self) -> Result<(), AggregateError> {
        let zero = T::zero();
        let one = T::one();
        if !(self.threshold > zero && self.threshold < one) {
            return Err(AggregateError::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        let cap = T::from_f64(0.01).unwrap();
        if !(self.epsilon > zero && self.epsilon < cap) {
            return Err(AggregateError::InvalidConfig(format!(
                "epsilon {} outside (0, 0.01)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Collapse per-sub-claim scores into one final score.
///
/// Scores are clamped into `[epsilon, 1]` first so a hard zero cannot zero the
/// harmonic mean denominator outright; the harmonic mean still punishes any
/// low score far harder than an arithmetic mean would.
pub fn aggregate<T: Scalar>(scores: &[T], cfg: &AggregatorConfig<T>) -> Result<T, AggregateError> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(AggregateError::EmptyScores);
    }
    let one = T::one();
    let clamped = scores.iter().map(|&s| s.max(cfg.epsilon).min(one));
    match cfg.method {
        AggregationMethod::HarmonicMean => {
            let n = T::from_usize(scores.len()).unwrap();
            let mut lo = one;
            let mut hi = cfg.epsilon;
            let mut denom = T::zero();
            for s in clamped {
                lo = lo.min(s);
                hi = hi.max(s);
                denom = denom + one / s;
            }
            // The true mean lies in [lo, hi], but reciprocal rounding can
            // push the computed one an ulp past either end; pin it back.
            Ok((n / denom).max(lo).min(hi))
        }
        AggregationMethod::Min => Ok(clamped.fold(one, |acc, s| acc.min(s))),
    }
}

/// Final verdict: `Supported` iff the aggregate score strictly exceeds the
/// threshold, so a score exactly at the threshold stays `Unsupported`.
pub fn classify<T: Scalar>(final_score: T, cfg: &AggregatorConfig<T>) -> Label {
    if final_score > cfg.threshold {
        Label::Supported
    } else {
        Label::Unsupported
    }
}
