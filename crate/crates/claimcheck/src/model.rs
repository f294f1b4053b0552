//! Shared data model: labels, dataset entries, decompositions and pipeline records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("record is not a JSON object")]
    NotAnObject,
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("field {0} has the wrong type")]
    BadField(String),
    #[error("input_text is empty")]
    EmptyInput,
    #[error("bad label: {0:?}")]
    BadLabel(String),
    #[error("bad method: {0:?}")]
    BadMethod(String),
    #[error("claims list is empty")]
    EmptyClaims,
    #[error("claim {0} has empty text")]
    EmptyClaim(usize),
    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

/// Binary veracity label. Serialized lowercase, parsed case-insensitively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Supported,
    Unsupported,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Supported => "supported",
            Label::Unsupported => "unsupported",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "supported" => Ok(Label::Supported),
            "unsupported" => Ok(Label::Unsupported),
            _ => Err(ModelError::BadLabel(s.to_string())),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(|e: ModelError| D::Error::custom(e.to_string()))
    }
}

/// A gold-annotated claim inside a dataset entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimAnnotation {
    pub text: String,
    pub label: Label,
}

/// One row of an evaluation dataset.
///
/// `meta` carries free-form string metadata; unknown JSONL fields end up there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub dataset_id: String,
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub gold_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims: Option<Vec<ClaimAnnotation>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

const KNOWN_FIELDS: [&str; 8] = [
    "id",
    "dataset_id",
    "input_text",
    "context",
    "question",
    "gold_label",
    "claims",
    "meta",
];

fn require_str(obj: &serde_json::Map<String, serde_json::Value>, name: &str) -> Result<String, ModelError> {
    match obj.get(name) {
        None | Some(serde_json::Value::Null) => Err(ModelError::MissingField(name.to_string())),
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ModelError::BadField(name.to_string())),
    }
}

/// Validate a raw JSON record against the dataset schema.
///
/// Unknown fields are preserved into `meta` (non-string values are kept as their
/// compact JSON encoding). Validating an already-valid entry is a no-op.
pub fn validate_entry(raw: &serde_json::Value) -> Result<DatasetEntry, ModelError> {
    let obj = raw.as_object().ok_or(ModelError::NotAnObject)?;

    let id = require_str(obj, "id")?;
    let dataset_id = require_str(obj, "dataset_id")?;
    let input_text = require_str(obj, "input_text")?;
    if input_text.trim().is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let gold_label: Label = require_str(obj, "gold_label")?.parse()?;

    let context = match obj.get("context") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    serde_json::Value::String(s) => out.push(s.clone()),
                    _ => return Err(ModelError::BadField("context".to_string())),
                }
            }
            Some(out)
        }
        Some(_) => return Err(ModelError::BadField("context".to_string())),
    };

    let question = match obj.get("question") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(ModelError::BadField("question".to_string())),
    };

    let claims = match obj.get("claims") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::Array(items)) => {
            if items.is_empty() {
                return Err(ModelError::EmptyClaims);
            }
            let mut out = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let claim = item.as_object().ok_or_else(|| ModelError::BadField("claims".to_string()))?;
                let text = require_str(claim, "text").map_err(|_| ModelError::BadField("claims".to_string()))?;
                if text.trim().is_empty() {
                    return Err(ModelError::EmptyClaim(i));
                }
                let label: Label = require_str(claim, "label")
                    .map_err(|_| ModelError::BadField("claims".to_string()))?
                    .parse()?;
                out.push(ClaimAnnotation { text, label });
            }
            Some(out)
        }
        Some(_) => return Err(ModelError::BadField("claims".to_string())),
    };

    let mut meta = BTreeMap::new();
    for (key, value) in obj {
        if KNOWN_FIELDS.contains(&key.as_str()) {
            continue;
        }
        let rendered = match value {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        meta.insert(key.clone(), rendered);
    }
    if let Some(serde_json::Value::Object(explicit)) = obj.get("meta") {
        for (key, value) in explicit {
            let rendered = match value {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            meta.insert(key.clone(), rendered);
        }
    } else if matches!(obj.get("meta"), Some(v) if !v.is_null()) {
        return Err(ModelError::BadField("meta".to_string()));
    }

    Ok(DatasetEntry {
        id,
        dataset_id,
        input_text,
        context,
        question,
        gold_label,
        claims,
        meta,
    })
}

/// Hex SHA-256 digest of an arbitrary payload; stable across runs and platforms.
pub fn cache_key(payload: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(payload);
    hex::encode(hasher.finalize())
}

/// How an input was decomposed into sub-claims.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    FactScore,
    VeriScore,
    Wice,
    ExactN(usize),
    Reflected(Box<Method>),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Baseline => "baseline".to_string(),
            Method::FactScore => "factscore".to_string(),
            Method::VeriScore => "veriscore".to_string(),
            Method::Wice => "wice".to_string(),
            Method::ExactN(n) => format!("exact-n:{n}"),
            Method::Reflected(base) => format!("reflected:{}", base.name()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let lower = trimmed.to_ascii_lowercase();
        match lower.as_str() {
            "baseline" => return Ok(Method::Baseline),
            "factscore" => return Ok(Method::FactScore),
            "veriscore" => return Ok(Method::VeriScore),
            "wice" => return Ok(Method::Wice),
            _ => {}
        }
        if let Some(rest) = lower.strip_prefix("exact-n:") {
            let n: usize = rest.parse().map_err(|_| ModelError::BadMethod(s.to_string()))?;
            if n == 0 {
                return Err(ModelError::BadMethod(s.to_string()));
            }
            return Ok(Method::ExactN(n));
        }
        if let Some(rest) = lower.strip_prefix("reflected:") {
            return Ok(Method::Reflected(Box::new(rest.parse()?)));
        }
        Err(ModelError::BadMethod(s.to_string()))
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(|e: ModelError| D::Error::custom(e.to_string()))
    }
}

/// One verifiable unit produced by decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubClaim {
    pub index: usize,
    pub text: String,
}

/// The result of decomposing one input text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub source_id: String,
    pub method: Method,
    pub model_id: String,
    pub subclaims: Vec<SubClaim>,
}

impl Decomposition {
    /// Build a decomposition from sub-claim texts, assigning contiguous indices.
    ///
    /// Enforces: nonempty list, nonempty texts, `Baseline` has exactly one
    /// sub-claim and `ExactN(n)` exactly `n`.
    pub fn new(method: Method, model_id: impl Into<String>, texts: Vec<String>) -> Result<Self, ModelError> {
        if texts.is_empty() {
            return Err(ModelError::InvalidDecomposition("no sub-claims".to_string()));
        }
        if matches!(method, Method::Baseline) && texts.len() != 1 {
            return Err(ModelError::InvalidDecomposition(format!(
                "baseline must have exactly 1 sub-claim, got {}",
                texts.len()
            )));
        }
        if let Method::ExactN(n) = method {
            if texts.len() != n {
                return Err(ModelError::InvalidDecomposition(format!(
                    "exact-n:{n} must have exactly {n} sub-claims, got {}",
                    texts.len()
                )));
            }
        }
        let mut subclaims = Vec::with_capacity(texts.len());
        for (index, text) in texts.into_iter().enumerate() {
            let text = text.trim().to_string();
            if text.is_empty() {
                return Err(ModelError::InvalidDecomposition(format!("sub-claim {index} is empty")));
            }
            subclaims.push(SubClaim { index, text });
        }
        Ok(Decomposition {
            source_id: String::new(),
            method,
            model_id: model_id.into(),
            subclaims,
        })
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn texts(&self) -> Vec<&str> {
        self.subclaims.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Verification outcome for one sub-claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubClaimScore {
    pub subclaim_index: usize,
    pub per_evidence: Vec<f64>,
    pub combined: f64,
    pub backend_id: String,
}

impl SubClaimScore {
    /// Combine per-evidence entailment scores; the combined score is the max.
    pub fn from_per_evidence(
        subclaim_index: usize,
        per_evidence: Vec<f64>,
        backend_id: impl Into<String>,
    ) -> Result<Self, ModelError> {
        if per_evidence.is_empty() {
            return Err(ModelError::InvalidRecord("no per-evidence scores".to_string()));
        }
        let mut combined = f64::NEG_INFINITY;
        for &score in &per_evidence {
            if !(0.0..=1.0).contains(&score) {
                return Err(ModelError::ScoreOutOfRange(score));
            }
            combined = combined.max(score);
        }
        Ok(SubClaimScore {
            subclaim_index,
            per_evidence,
            combined,
            backend_id: backend_id.into(),
        })
    }
}

/// End-to-end result for one dataset entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub entry_id: String,
    pub decomposition: Decomposition,
    pub subclaim_scores: Vec<SubClaimScore>,
    pub final_score: f64,
    pub predicted: Label,
}

impl PipelineRecord {
    /// Assemble a record; `predicted` is derived from `final_score > threshold`
    /// so the stored verdict is consistent by construction.
    pub fn new(
        entry_id: impl Into<String>,
        decomposition: Decomposition,
        subclaim_scores: Vec<SubClaimScore>,
        final_score: f64,
        threshold: f64,
    ) -> Result<Self, ModelError> {
        if subclaim_scores.len() != decomposition.subclaims.len() {
            return Err(ModelError::InvalidRecord(format!(
                "{} sub-claims but {} scores",
                decomposition.subclaims.len(),
                subclaim_scores.len()
            )));
        }
        for (i, s) in subclaim_scores.iter().enumerate() {
            if s.subclaim_index != i {
                return Err(ModelError::InvalidRecord(format!(
                    "score {i} carries subclaim_index {}",
                    s.subclaim_index
                )));
            }
        }
        if !(0.0..=1.0).contains(&final_score) {
            return Err(ModelError::ScoreOutOfRange(final_score));
        }
        let predicted = if final_score > threshold {
            Label::Supported
        } else {
            Label::Unsupported
        };
        Ok(PipelineRecord {
            entry_id: entry_id.into(),
            decomposition,
            subclaim_scores,
            final_score,
            predicted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_raw() -> serde_json::Value {
        serde_json::json!({
            "id": "e1",
            "dataset_id": "wice",
            "input_text": "The Arctic Ocean is the smallest ocean.",
            "gold_label": "supported",
        })
    }

    #[test]
    fn label_round_trips_and_parses_case_insensitively() {
        for label in [Label::Supported, Label::Unsupported] {
            let parsed: Label = label.as_str().parse().unwrap();
            assert_eq!(parsed, label);
            let upper: Label = label.as_str().to_uppercase().parse().unwrap();
            assert_eq!(upper, label);
        }
        assert_eq!("Supported".parse::<Label>().unwrap(), Label::Supported);
        assert_eq!(
            serde_json::to_string(&Label::Unsupported).unwrap(),
            "\"unsupported\""
        );
        assert!(matches!("maybe".parse::<Label>(), Err(ModelError::BadLabel(_))));
    }

    #[test]
    fn validate_entry_accepts_minimal_record() {
        let entry = validate_entry(&sample_raw()).unwrap();
        assert_eq!(entry.id, "e1");
        assert_eq!(entry.gold_label, Label::Supported);
        assert!(entry.context.is_none());
        assert!(entry.meta.is_empty());
    }

    #[test]
    fn validate_entry_reports_missing_fields() {
        let mut raw = sample_raw();
        raw.as_object_mut().unwrap().remove("gold_label");
        assert_eq!(
            validate_entry(&raw),
            Err(ModelError::MissingField("gold_label".to_string()))
        );
    }

    #[test]
    fn validate_entry_rejects_empty_input() {
        let mut raw = sample_raw();
        raw["input_text"] = serde_json::json!("   ");
        assert_eq!(validate_entry(&raw), Err(ModelError::EmptyInput));
    }

    #[test]
    fn validate_entry_rejects_bad_label() {
        let mut raw = sample_raw();
        raw["gold_label"] = serde_json::json!("mostly-true");
        assert!(matches!(validate_entry(&raw), Err(ModelError::BadLabel(_))));
    }

    #[test]
    fn validate_entry_preserves_unknown_fields_in_meta() {
        let mut raw = sample_raw();
        raw["split"] = serde_json::json!("dev");
        raw["fold"] = serde_json::json!(3);
        let entry = validate_entry(&raw).unwrap();
        assert_eq!(entry.meta.get("split").map(String::as_str), Some("dev"));
        assert_eq!(entry.meta.get("fold").map(String::as_str), Some("3"));
    }

    #[test]
    fn validate_entry_is_idempotent() {
        let mut raw = sample_raw();
        raw["claims"] = serde_json::json!([
            {"text": "The Arctic Ocean is an ocean.", "label": "supported"},
            {"text": "It is tiny.", "label": "unsupported"},
        ]);
        raw["extra"] = serde_json::json!({"nested": true});
        let entry = validate_entry(&raw).unwrap();
        let reserialized = serde_json::to_value(&entry).unwrap();
        let again = validate_entry(&reserialized).unwrap();
        assert_eq!(entry, again);
    }

    #[test]
    fn validate_entry_rejects_empty_claims() {
        let mut raw = sample_raw();
        raw["claims"] = serde_json::json!([]);
        assert_eq!(validate_entry(&raw), Err(ModelError::EmptyClaims));
    }

    #[test]
    fn cache_key_is_pure_and_collision_sensitive() {
        let a = cache_key(b"payload-a");
        let b = cache_key(b"payload-b");
        assert_eq!(a, cache_key(b"payload-a"));
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
        // Independent digest of the same bytes.
        let expected = {
            let mut hasher = Sha256::new();
            hasher.update(b"payload-a");
            hex::encode(hasher.finalize())
        };
        assert_eq!(a, expected);
    }

    #[test]
    fn method_names_round_trip() {
        let methods = [
            Method::Baseline,
            Method::FactScore,
            Method::VeriScore,
            Method::Wice,
            Method::ExactN(4),
            Method::Reflected(Box::new(Method::FactScore)),
            Method::Reflected(Box::new(Method::ExactN(2))),
        ];
        for method in methods {
            let parsed: Method = method.name().parse().unwrap();
            assert_eq!(parsed, method);
        }
        assert!("exact-n:0".parse::<Method>().is_err());
        assert!("mystery".parse::<Method>().is_err());
    }

    #[test]
    fn decomposition_enforces_counts() {
        assert!(Decomposition::new(Method::Baseline, "m", vec!["a".into(), "b".into()]).is_err());
        assert!(Decomposition::new(Method::ExactN(3), "m", vec!["a".into()]).is_err());
        assert!(Decomposition::new(Method::FactScore, "m", vec![]).is_err());
        let d = Decomposition::new(Method::FactScore, "m", vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(
            d.subclaims.iter().map(|s| s.index).collect::<Vec<_>>(),
            vec![0, 1]
        );
    }

    #[test]
    fn subclaim_score_combines_with_max() {
        let s = SubClaimScore::from_per_evidence(0, vec![0.2, 0.9, 0.4], "nli").unwrap();
        assert_eq!(s.combined, 0.9);
        assert!(SubClaimScore::from_per_evidence(0, vec![], "nli").is_err());
        assert!(matches!(
            SubClaimScore::from_per_evidence(0, vec![1.2], "nli"),
            Err(ModelError::ScoreOutOfRange(_))
        ));
    }

    #[test]
    fn pipeline_record_predicts_from_threshold() {
        let d = Decomposition::new(Method::Baseline, "m", vec!["a".into()]).unwrap();
        let s = vec![SubClaimScore::from_per_evidence(0, vec![0.5], "nli").unwrap()];
        let rec = PipelineRecord::new("e1", d.clone(), s.clone(), 0.5, 0.5).unwrap();
        assert_eq!(rec.predicted, Label::Unsupported);
        let rec = PipelineRecord::new("e1", d, s, 0.51, 0.5).unwrap();
        assert_eq!(rec.predicted, Label::Supported);
    }
}
