//! Dataset loading, label binarization and classification metrics.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{validate_entry, DatasetEntry, Label, PipelineRecord};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate entry id: {0}")]
    DuplicateId(String),
    #[error("unknown raw label {raw:?} for dataset {dataset_id:?}")]
    UnknownRawLabel { dataset_id: String, raw: String },
    #[error("predictions and golds differ in length ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("nothing to evaluate")]
    Empty,
}

/// Counts with `Supported` as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
pub struct Metrics<T: Scalar> {
    pub bacc: T,
    pub f1: T,
    pub precision: T,
    pub recall: T,
}

/// Tally predictions against golds, pairwise by position.
pub fn confusion(preds: &[Label], golds: &[Label]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&pred, &gold) in preds.iter().zip(golds) {
        match (pred, gold) {
            (Label::Supported, Label::Supported) => cm.true_pos += 1,
            (Label::Supported, Label::Unsupported) => cm.false_pos += 1,
            (Label::Unsupported, Label::Unsupported) => cm.true_neg += 1,
            (Label::Unsupported, Label::Supported) => cm.false_neg += 1,
        }
    }
    Ok(cm)
}

fn ratio<T: Scalar>(num: u64, den: u64) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from_u64(num).unwrap() / T::from_u64(den).unwrap()
    }
}

/// Balanced accuracy, F1, precision and recall, with any 0/0 term defined as 0.
pub fn metrics<T: Scalar>(cm: &ConfusionMatrix) -> Metrics<T> {
    let recall: T = ratio(cm.true_pos, cm.true_pos + cm.false_neg);
    let precision: T = ratio(cm.true_pos, cm.true_pos + cm.false_pos);
    let tnr: T = ratio(cm.true_neg, cm.true_neg + cm.false_pos);
    let two = T::from_f64(2.0).unwrap();
    let f1 = if precision + recall == T::zero() {
        T::zero()
    } else {
        two * precision * recall / (precision + recall)
    };
    let bacc = (recall + tnr) / two;
    Metrics {
        bacc,
        f1,
        precision,
        recall,
    }
}

/// Map a dataset's raw label vocabulary onto the binary scheme.
///
/// * `wice`: SUPPORTED is positive; PARTIALLY-SUPPORTED and NOT-SUPPORTED both
///   collapse to Unsupported.
/// * `claimdecomp`: pants-on-fire, false, barely-true and half-true collapse to
///   Unsupported; mostly-true and true to Supported.
/// * `felm`: true/false segment annotations.
/// * `bingchat`: per-claim annotations; refuted means Unsupported.
///
/// Matching is case-insensitive; anything else is an error.
pub fn binarize_label(dataset_id: &str, raw: &str) -> Result<Label, EvalError> {
    let unknown = || EvalError::UnknownRawLabel {
        dataset_id: dataset_id.to_string(),
        raw: raw.to_string(),
    };
    let folded = raw.trim().to_ascii_lowercase();
    match dataset_id {
        "wice" => match folded.as_str() {
            "supported" => Ok(Label::Supported),
            "partially-supported" | "not-supported" => Ok(Label::Unsupported),
            _ => Err(unknown()),
        },
        "claimdecomp" => match folded.as_str() {
            "pants-on-fire" | "false" | "barely-true" | "half-true" => Ok(Label::Unsupported),
            "mostly-true" | "true" => Ok(Label::Supported),
            _ => Err(unknown()),
        },
        "felm" => match folded.as_str() {
            "true" => Ok(Label::Supported),
            "false" => Ok(Label::Unsupported),
            _ => Err(unknown()),
        },
        "bingchat" => match folded.as_str() {
            "supported" => Ok(Label::Supported),
            "refuted" => Ok(Label::Unsupported),
            _ => Err(unknown()),
        },
        _ => Err(unknown()),
    }
}

/// Read a JSONL dataset, validating every record. Blank lines are skipped;
/// parse and validation failures carry their 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetEntry>, EvalError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| EvalError::ParseError {
                line: i + 1,
                message: e.to_string(),
            })?;
        let entry = validate_entry(&raw).map_err(|e| EvalError::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(EvalError::DuplicateId(entry.id));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Mean number of sub-claims across records.
pub fn avg_subclaims(records: &[PipelineRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: usize = records.iter().map(|r| r.decomposition.subclaims.len()).sum();
    Ok(total as f64 / records.len() as f64)
}

/// Summary of one evaluated run, serialized as a JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset_id: String,
    pub method: String,
    pub verifier: String,
    pub n_entries: usize,
    pub n_failed: usize,
    pub avg_subclaims: f64,
    pub bacc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}
