//! Decomposition error taxonomy, few-shot error detection, reflection-based
//! refinement and error distributions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decomposer::{parse_fenced_blocks, parse_subclaims, render_messages, DecomposeError, PromptLibrary};
use crate::gateway::{ChatRequest, GatewayError, LlmGateway};
use crate::model::{Decomposition, Method, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("unknown error type: {0:?}")]
    UnknownErrorType(String),
    #[error("subtype {subtype} does not belong to category {category}")]
    InvalidPairing { category: String, subtype: String },
    #[error("missing section: {0:?}")]
    MissingSection(String),
    #[error("unrecognized judgment: {0:?}")]
    BadJudgment(String),
    #[error("inconsistent report: {0}")]
    InconsistentReport(String),
    #[error("refined decomposition is empty")]
    EmptyRefinement,
    #[error("no reports to aggregate")]
    EmptyReports,
    #[error(transparent)]
    Prompt(#[from] DecomposeError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorCategory {
    OmissionOfContext,
    Ambiguity,
    OverDecomposition,
    AlterationOfMeaning,
}

pub const ALL_CATEGORIES: [ErrorCategory; 4] = [
    ErrorCategory::OmissionOfContext,
    ErrorCategory::Ambiguity,
    ErrorCategory::OverDecomposition,
    ErrorCategory::AlterationOfMeaning,
];

impl ErrorCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCategory::OmissionOfContext => "Omission of Context Information",
            ErrorCategory::Ambiguity => "Ambiguity",
            ErrorCategory::OverDecomposition => "Over-Decomposition",
            ErrorCategory::AlterationOfMeaning => "Alteration of Original Meaning",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorSubtype {
    MissingCoreClaims,
    MissingLogicalRelationships,
    VagueLanguage,
    RedundantInformation,
    ExcessiveFragmentation,
}

impl ErrorSubtype {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorSubtype::MissingCoreClaims => "Missing Core Claims or Key Details",
            ErrorSubtype::MissingLogicalRelationships => "Missing Logical Relationships",
            ErrorSubtype::VagueLanguage => "Vague Language",
            ErrorSubtype::RedundantInformation => "Redundant Information",
            ErrorSubtype::ExcessiveFragmentation => "Excessive Fragmentation",
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            ErrorSubtype::MissingCoreClaims | ErrorSubtype::MissingLogicalRelationships => {
                ErrorCategory::OmissionOfContext
            }
            ErrorSubtype::VagueLanguage => ErrorCategory::Ambiguity,
            ErrorSubtype::RedundantInformation | ErrorSubtype::ExcessiveFragmentation => {
                ErrorCategory::OverDecomposition
            }
        }
    }
}

impl fmt::Display for ErrorSubtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn normalize_name(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn match_category(s: &str) -> Option<ErrorCategory> {
    let needle = normalize_name(s);
    ALL_CATEGORIES
        .into_iter()
        .find(|c| normalize_name(c.as_str()) == needle)
}

fn match_subtype(s: &str) -> Option<ErrorSubtype> {
    let needle = normalize_name(s);
    [
        ErrorSubtype::MissingCoreClaims,
        ErrorSubtype::MissingLogicalRelationships,
        ErrorSubtype::VagueLanguage,
        ErrorSubtype::RedundantInformation,
        ErrorSubtype::ExcessiveFragmentation,
    ]
    .into_iter()
    .find(|sub| normalize_name(sub.as_str()) == needle)
}

/// One taxonomy entry: a category with an optional subtype that must belong
/// to it. A bare category (no subtype) is valid for every category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ErrorType {
    pub category: ErrorCategory,
    pub subtype: Option<ErrorSubtype>,
}

impl ErrorType {
    pub fn new(category: ErrorCategory, subtype: Option<ErrorSubtype>) -> Result<Self, AnalysisError> {
        if let Some(sub) = subtype {
            if sub.category() != category {
                return Err(AnalysisError::InvalidPairing {
                    category: category.as_str().to_string(),
                    subtype: sub.as_str().to_string(),
                });
            }
        }
        Ok(ErrorType { category, subtype })
    }

    pub fn canonical(&self) -> String {
        match self.subtype {
            Some(sub) => format!("{} - {}", self.category, sub),
            None => self.category.to_string(),
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for ErrorType {
    type Err = AnalysisError;

    /// Accepts "Category - Subtype", "Category: Subtype" and bare "Category",
    /// case-insensitively with collapsed whitespace. Anything outside the
    /// taxonomy is an error rather than a silent coercion.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((left, right)) = s.split_once(" - ") {
            if let (Some(category), Some(subtype)) = (match_category(left), match_subtype(right)) {
                return ErrorType::new(category, Some(subtype));
            }
        }
        if let Some((left, right)) = s.split_once(':') {
            let left = left.trim().trim_start_matches('-').trim();
            if let (Some(category), Some(subtype)) = (match_category(left), match_subtype(right)) {
                return ErrorType::new(category, Some(subtype));
            }
        }
        match match_category(s) {
            Some(category) => ErrorType::new(category, None),
            None => Err(AnalysisError::UnknownErrorType(s.trim().to_string())),
        }
    }
}

impl Serialize for ErrorType {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for ErrorType {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Judgment {
    Acceptable,
    Problematic,
    NoNeedForDecomposition,
}

impl Judgment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Judgment::Acceptable => "Acceptable",
            Judgment::Problematic => "Problematic",
            Judgment::NoNeedForDecomposition => "No need for decomposition",
        }
    }
}

impl fmt::Display for Judgment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Judgment {
    type Err = AnalysisError;

    /// "Good" (reflection vocabulary) is folded into Acceptable.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let cleaned = normalize_name(s.trim().trim_matches(|c: char| c.is_ascii_punctuation() || c == '\'' || c == '"'));
        match cleaned.as_str() {
            "acceptable" | "good" => Ok(Judgment::Acceptable),
            "problematic" => Ok(Judgment::Problematic),
            "no need for decomposition" => Ok(Judgment::NoNeedForDecomposition),
            _ => Err(AnalysisError::BadJudgment(s.trim().to_string())),
        }
    }
}

impl Serialize for Judgment {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Judgment {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub judgment: Judgment,
    pub errors: Vec<ErrorType>,
    pub reasoning: String,
    #[serde(skip)]
    pub raw: String,
}

impl ErrorReport {
    pub fn new(
        judgment: Judgment,
        errors: Vec<ErrorType>,
        reasoning: String,
        raw: String,
    ) -> Result<Self, AnalysisError> {
        match judgment {
            Judgment::Problematic if errors.is_empty() => Err(AnalysisError::InconsistentReport(
                "judged Problematic but no errors were identified".to_string(),
            )),
            Judgment::Acceptable | Judgment::NoNeedForDecomposition if !errors.is_empty() => {
                Err(AnalysisError::InconsistentReport(format!(
                    "judged {judgment} but {} error(s) were identified",
                    errors.len()
                )))
            }
            _ => Ok(ErrorReport {
                judgment,
                errors,
                reasoning,
                raw,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReflectionResult {
    pub report: ErrorReport,
    pub refined: Decomposition,
}

/// Body of the section under `### {header}`: the first fenced block if one is
/// present, otherwise the raw lines up to the next section header.
fn extract_section(text: &str, header: &str) -> Option<String> {
    let wanted = normalize_name(&format!("### {header}"));
    let mut body_lines: Vec<&str> = Vec::new();
    let mut in_section = false;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with("### ") {
            if in_section {
                break;
            }
            in_section = normalize_name(trimmed) == wanted;
            continue;
        }
        if in_section {
            body_lines.push(line);
        }
    }
    if !in_section && body_lines.is_empty() {
        return None;
    }
    let body = body_lines.join("\n");
    let fenced = parse_fenced_blocks(&body);
    Some(match fenced.into_iter().next() {
        Some(block) => block,
        None => body.trim().to_string(),
    })
}

fn required_section(text: &str, header: &str) -> Result<String, AnalysisError> {
    extract_section(text, header).ok_or_else(|| AnalysisError::MissingSection(header.to_string()))
}

fn is_no_error_line(line: &str) -> bool {
    matches!(
        normalize_name(line).as_str(),
        "none" | "no error" | "no errors" | "n/a" | "na" | "-"
    )
}

fn parse_error_lines(body: &str) -> Result<Vec<ErrorType>, AnalysisError> {
    let mut errors = Vec::new();
    for line in body.lines() {
        let item = line.trim().trim_start_matches("- ").trim_start_matches("* ").trim();
        if item.is_empty() || is_no_error_line(item) {
            continue;
        }
        errors.push(item.parse()?);
    }
    Ok(errors)
}

fn parse_judgment_section(text: &str) -> Result<Judgment, AnalysisError> {
    let body = required_section(text, "Judgment")?;
    let line = body
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| AnalysisError::BadJudgment(String::new()))?;
    line.parse()
}

/// Parse a detection response: "### Reasoning", "### Error Type" and
/// "### Judgment" sections, each fenced. Detection vocabulary is
/// Acceptable/Problematic only.
pub fn parse_detection_response(raw: &str) -> Result<ErrorReport, AnalysisError> {
    let reasoning = required_section(raw, "Reasoning")?;
    let errors = parse_error_lines(&required_section(raw, "Error Type")?)?;
    let judgment = parse_judgment_section(raw)?;
    if judgment == Judgment::NoNeedForDecomposition {
        return Err(AnalysisError::BadJudgment(judgment.to_string()));
    }
    ErrorReport::new(judgment, errors, reasoning, raw.to_string())
}

/// Parse a reflection response: the detection sections plus
/// "### Refined Decomposition". The refined sub-claims are taken from that
/// section when the judgment is Problematic; a Good judgment keeps the
/// original decomposition and "No need for decomposition" collapses to the
/// input text as the single sub-claim.
pub fn parse_reflection_response(
    raw: &str,
    input_text: &str,
    original: &Decomposition,
    model_id: &str,
) -> Result<ReflectionResult, AnalysisError> {
    let reasoning = required_section(raw, "Reasoning")?;
    let errors = parse_error_lines(&required_section(raw, "Error Type")?)?;
    let judgment = parse_judgment_section(raw)?;
    let report = ErrorReport::new(judgment, errors, reasoning, raw.to_string())?;
    let refined_texts = match judgment {
        Judgment::Problematic => {
            let body = required_section(raw, "Refined Decomposition")?;
            let texts = parse_subclaims(&body);
            if texts.is_empty() {
                return Err(AnalysisError::EmptyRefinement);
            }
            texts
        }
        Judgment::Acceptable => original.texts().iter().map(|s| s.to_string()).collect(),
        Judgment::NoNeedForDecomposition => vec![input_text.trim().to_string()],
    };
    let refined = Decomposition::new(
        Method::Reflected(Box::new(original.method.clone())),
        model_id,
        refined_texts,
    )?;
    Ok(ReflectionResult { report, refined })
}

fn decomposition_bullets(decomposition: &Decomposition) -> String {
    decomposition
        .subclaims
        .iter()
        .map(|s| format!("- {}", s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct Analyzer {
    gateway: Arc<LlmGateway>,
    prompts: PromptLibrary,
    model_id: String,
}

impl Analyzer {
    pub fn new(gateway: Arc<LlmGateway>, prompts: PromptLibrary, model_id: impl Into<String>) -> Self {
        Analyzer {
            gateway,
            prompts,
            model_id: model_id.into(),
        }
    }

    async fn prompt(&self, template_name: &str, input_text: &str, decomposition: &Decomposition) -> Result<String, AnalysisError> {
        let template = self.prompts.get(template_name)?;
        let bullets = decomposition_bullets(decomposition);
        let messages = render_messages(
            template,
            &[("input_text", input_text), ("decomposition", bullets.as_str())],
        );
        let response = self
            .gateway
            .complete(&ChatRequest::new(self.model_id.clone(), messages))
            .await?;
        Ok(response.text)
    }

    pub async fn detect_errors(
        &self,
        input_text: &str,
        decomposition: &Decomposition,
    ) -> Result<ErrorReport, AnalysisError> {
        let raw = self.prompt("detect_errors", input_text, decomposition).await?;
        parse_detection_response(&raw)
    }

    pub async fn reflect(
        &self,
        input_text: &str,
        decomposition: &Decomposition,
    ) -> Result<ReflectionResult, AnalysisError> {
        let raw = self.prompt("reflect", input_text, decomposition).await?;
        parse_reflection_response(&raw, input_text, decomposition, &self.model_id)
    }
}

/// Per-category presence ratios: the fraction of reports that contain at
/// least one error of the category. Multi-label, so ratios may sum past 1;
/// every category appears in the map, with 0.0 when absent.
pub fn error_distribution(reports: &[ErrorReport]) -> Result<BTreeMap<ErrorCategory, f64>, AnalysisError> {
    if reports.is_empty() {
        return Err(AnalysisError::EmptyReports);
    }
    let mut out = BTreeMap::new();
    for category in ALL_CATEGORIES {
        let hits = reports
            .iter()
            .filter(|r| r.errors.iter().any(|e| e.category == category))
            .count();
        out.insert(category, hits as f64 / reports.len() as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposer::Decomposer;
    use crate::gateway::{GatewayConfig, ScriptedChatBackend, ScriptedReply};

    fn et(category: ErrorCategory, subtype: Option<ErrorSubtype>) -> ErrorType {
        ErrorType::new(category, subtype).unwrap()
    }

    #[test]
    fn parses_both_separators_and_bare_category() {
        let dash: ErrorType = "Omission of Context Information - Missing Logical Relationships"
            .parse()
            .unwrap();
        assert_eq!(
            dash,
            et(
                ErrorCategory::OmissionOfContext,
                Some(ErrorSubtype::MissingLogicalRelationships)
            )
        );
        let colon: ErrorType = "Over-Decomposition: Excessive Fragmentation".parse().unwrap();
        assert_eq!(
            colon,
            et(
                ErrorCategory::OverDecomposition,
                Some(ErrorSubtype::ExcessiveFragmentation)
            )
        );
        let bare: ErrorType = "Alteration of Original Meaning".parse().unwrap();
        assert_eq!(bare, et(ErrorCategory::AlterationOfMeaning, None));
        let case: ErrorType = "ambiguity - vague language".parse().unwrap();
        assert_eq!(case, et(ErrorCategory::Ambiguity, Some(ErrorSubtype::VagueLanguage)));
    }

    #[test]
    fn unknown_and_mismatched_types_are_rejected() {
        assert!(matches!(
            "Totally Made Up".parse::<ErrorType>(),
            Err(AnalysisError::UnknownErrorType(_))
        ));
        assert!(matches!(
            "Ambiguity - Redundant Information".parse::<ErrorType>(),
            Err(AnalysisError::InvalidPairing { .. })
        ));
        assert!(matches!(
            ErrorType::new(ErrorCategory::Ambiguity, Some(ErrorSubtype::RedundantInformation)),
            Err(AnalysisError::InvalidPairing { .. })
        ));
    }

    #[test]
    fn canonical_rendering_round_trips() {
        let all = [
            et(ErrorCategory::OmissionOfContext, Some(ErrorSubtype::MissingCoreClaims)),
            et(
                ErrorCategory::OmissionOfContext,
                Some(ErrorSubtype::MissingLogicalRelationships),
            ),
            et(ErrorCategory::Ambiguity, Some(ErrorSubtype::VagueLanguage)),
            et(
                ErrorCategory::OverDecomposition,
                Some(ErrorSubtype::RedundantInformation),
            ),
            et(
                ErrorCategory::OverDecomposition,
                Some(ErrorSubtype::ExcessiveFragmentation),
            ),
            et(ErrorCategory::AlterationOfMeaning, None),
        ];
        for original in all {
            let round: ErrorType = original.canonical().parse().unwrap();
            assert_eq!(round, original);
        }
    }

    #[test]
    fn judgment_vocabulary() {
        assert_eq!("Acceptable".parse::<Judgment>().unwrap(), Judgment::Acceptable);
        assert_eq!("good".parse::<Judgment>().unwrap(), Judgment::Acceptable);
        assert_eq!("'Problematic'".parse::<Judgment>().unwrap(), Judgment::Problematic);
        assert_eq!(
            "No need for decomposition".parse::<Judgment>().unwrap(),
            Judgment::NoNeedForDecomposition
        );
        assert!("maybe".parse::<Judgment>().is_err());
    }

    const DETECTION_PROBLEMATIC: &str = "### Reasoning\n```\nThe causal link is dropped.\n```\n\n### Error Type\n```\nOmission of Context Information - Missing Logical Relationships\n```\n\n### Judgment\n```\nProblematic\n```";

    const DETECTION_ACCEPTABLE: &str = "### Reasoning\n```\nEach sub-claim is self-contained.\n```\n\n### Error Type\n```\nNone\n```\n\n### Judgment\n```\nAcceptable\n```";

    #[test]
    fn detection_parses_problematic_report() {
        let report = parse_detection_response(DETECTION_PROBLEMATIC).unwrap();
        assert_eq!(report.judgment, Judgment::Problematic);
        assert_eq!(
            report.errors,
            vec![et(
                ErrorCategory::OmissionOfContext,
                Some(ErrorSubtype::MissingLogicalRelationships)
            )]
        );
        assert_eq!(report.reasoning, "The causal link is dropped.");
    }

    #[test]
    fn detection_parses_acceptable_report() {
        let report = parse_detection_response(DETECTION_ACCEPTABLE).unwrap();
        assert_eq!(report.judgment, Judgment::Acceptable);
        assert!(report.errors.is_empty());
    }

    #[test]
    fn detection_parses_multi_error_bullets() {
        let raw = "### Reasoning\n```\nSeveral issues.\n```\n\n### Error Type\n```\n- Over-Decomposition: Excessive Fragmentation\n- Over-Decomposition: Redundant Information\n- Omission of Context Information: Missing Core Claims or Key Details\n- Alteration of Original Meaning\n```\n\n### Judgment\n```\nProblematic\n```";
        let report = parse_detection_response(raw).unwrap();
        assert_eq!(report.errors.len(), 4);
        assert_eq!(report.errors[3], et(ErrorCategory::AlterationOfMeaning, None));
    }

    #[test]
    fn detection_requires_sections() {
        let no_judgment = "### Reasoning\n```\nr\n```\n\n### Error Type\n```\nNone\n```";
        assert!(matches!(
            parse_detection_response(no_judgment),
            Err(AnalysisError::MissingSection(s)) if s == "Judgment"
        ));
        let no_reasoning = "### Error Type\n```\nNone\n```\n\n### Judgment\n```\nAcceptable\n```";
        assert!(matches!(
            parse_detection_response(no_reasoning),
            Err(AnalysisError::MissingSection(s)) if s == "Reasoning"
        ));
    }

    #[test]
    fn detection_rejects_inconsistent_reports() {
        let problematic_no_errors = "### Reasoning\n```\nr\n```\n\n### Error Type\n```\nNone\n```\n\n### Judgment\n```\nProblematic\n```";
        assert!(matches!(
            parse_detection_response(problematic_no_errors),
            Err(AnalysisError::InconsistentReport(_))
        ));
        let acceptable_with_errors = "### Reasoning\n```\nr\n```\n\n### Error Type\n```\nAmbiguity\n```\n\n### Judgment\n```\nAcceptable\n```";
        assert!(matches!(
            parse_detection_response(acceptable_with_errors),
            Err(AnalysisError::InconsistentReport(_))
        ));
    }

    #[test]
    fn detection_rejects_reflection_only_judgment() {
        let raw = "### Reasoning\n```\nr\n```\n\n### Error Type\n```\nNone\n```\n\n### Judgment\n```\nNo need for decomposition\n```";
        assert!(matches!(parse_detection_response(raw), Err(AnalysisError::BadJudgment(_))));
    }

    fn original() -> Decomposition {
        Decomposition::new(
            Method::FactScore,
            "m",
            vec!["French authorities cancelled visas.".to_string(), "French authorities deported citizens.".to_string()],
        )
        .unwrap()
    }

    #[test]
    fn reflection_problematic_takes_refined_section() {
        let raw = "### Reasoning\n```\nCausal link missing.\n```\n\n### Error Type\n```\nOmission of Context Information - Missing Logical Relationships\n```\n\n### Judgment\n```\nProblematic\n```\n\n### Refined Decomposition\n```\n- Due to Imran Khan's criticism of Macron's comments on Islam, French authorities cancelled the visas of 183 Pakistani citizens.\n- Due to Imran Khan's criticism of Macron's comments on Islam, French authorities deported 118 Pakistani citizens from the country.\n```";
        let result = parse_reflection_response(raw, "input", &original(), "m").unwrap();
        assert_eq!(result.report.judgment, Judgment::Problematic);
        assert_eq!(result.refined.subclaims.len(), 2);
        assert!(result
            .refined
            .texts()
            .iter()
            .all(|t| t.starts_with("Due to Imran Khan's criticism")));
        assert_eq!(
            result.refined.method,
            Method::Reflected(Box::new(Method::FactScore))
        );
    }

    #[test]
    fn reflection_good_keeps_original() {
        let raw = "### Reasoning\n```\nFine as is.\n```\n\n### Error Type\n```\nNone\n```\n\n### Judgment\n```\nGood\n```\n\n### Refined Decomposition\n```\n- ignored\n```";
        let result = parse_reflection_response(raw, "input", &original(), "m").unwrap();
        assert_eq!(result.report.judgment, Judgment::Acceptable);
        assert_eq!(
            result.refined.texts(),
            original().texts(),
            "Good verdict must keep the original sub-claims"
        );
    }

    #[test]
    fn reflection_no_need_collapses_to_input() {
        let raw = "### Reasoning\n```\nAlready atomic.\n```\n\n### Error Type\n```\nNone\n```\n\n### Judgment\n```\nNo need for decomposition\n```\n\n### Refined Decomposition\n```\n- whatever\n```";
        let result = parse_reflection_response(raw, "The input claim.", &original(), "m").unwrap();
        assert_eq!(result.report.judgment, Judgment::NoNeedForDecomposition);
        assert_eq!(result.refined.texts(), vec!["The input claim."]);
    }

    #[test]
    fn reflection_problematic_with_empty_refinement_fails() {
        let raw = "### Reasoning\n```\nBad.\n```\n\n### Error Type\n```\nAmbiguity\n```\n\n### Judgment\n```\nProblematic\n```\n\n### Refined Decomposition\n```\n\n```";
        let err = parse_reflection_response(raw, "input", &original(), "m").unwrap_err();
        assert!(matches!(err, AnalysisError::MissingSection(_) | AnalysisError::EmptyRefinement));
        let missing = "### Reasoning\n```\nBad.\n```\n\n### Error Type\n```\nAmbiguity\n```\n\n### Judgment\n```\nProblematic\n```";
        assert!(matches!(
            parse_reflection_response(missing, "input", &original(), "m"),
            Err(AnalysisError::MissingSection(_))
        ));
    }

    #[test]
    fn distribution_counts_presence_per_report() {
        let r1 = ErrorReport::new(
            Judgment::Problematic,
            vec![
                et(
                    ErrorCategory::OverDecomposition,
                    Some(ErrorSubtype::RedundantInformation),
                ),
                et(
                    ErrorCategory::OverDecomposition,
                    Some(ErrorSubtype::ExcessiveFragmentation),
                ),
                et(ErrorCategory::Ambiguity, Some(ErrorSubtype::VagueLanguage)),
            ],
            String::new(),
            String::new(),
        )
        .unwrap();
        let r2 = ErrorReport::new(
            Judgment::Problematic,
            vec![et(
                ErrorCategory::OverDecomposition,
                Some(ErrorSubtype::ExcessiveFragmentation),
            )],
            String::new(),
            String::new(),
        )
        .unwrap();
        let dist = error_distribution(&[r1, r2]).unwrap();
        assert_eq!(dist[&ErrorCategory::OverDecomposition], 1.0);
        assert_eq!(dist[&ErrorCategory::Ambiguity], 0.5);
        assert_eq!(dist[&ErrorCategory::OmissionOfContext], 0.0);
        assert_eq!(dist[&ErrorCategory::AlterationOfMeaning], 0.0);
    }

    #[test]
    fn distribution_all_acceptable_is_zero() {
        let r = ErrorReport::new(Judgment::Acceptable, vec![], String::new(), String::new()).unwrap();
        let dist = error_distribution(&[r]).unwrap();
        assert!(dist.values().all(|v| *v == 0.0));
    }

    #[test]
    fn distribution_all_categories_hits_one() {
        let r = ErrorReport::new(
            Judgment::Problematic,
            vec![
                et(ErrorCategory::OmissionOfContext, None),
                et(ErrorCategory::Ambiguity, None),
                et(ErrorCategory::OverDecomposition, None),
                et(ErrorCategory::AlterationOfMeaning, None),
            ],
            String::new(),
            String::new(),
        )
        .unwrap();
        let dist = error_distribution(&[r]).unwrap();
        assert!(dist.values().all(|v| *v == 1.0));
    }

    #[test]
    fn distribution_requires_reports() {
        assert!(matches!(error_distribution(&[]), Err(AnalysisError::EmptyReports)));
    }

    #[tokio::test]
    async fn analyzer_detects_and_reflects_via_gateway() {
        let detection_needle = "### Decomposition";
        let backend = Arc::new(ScriptedChatBackend::new(vec![ScriptedReply {
            needle: detection_needle.to_string(),
            text: DETECTION_PROBLEMATIC.to_string(),
            token_logprobs: None,
        }]));
        let gateway = Arc::new(LlmGateway::new(backend, GatewayConfig::default()));
        let analyzer = Analyzer::new(gateway, PromptLibrary::builtin(), "judge");
        let decomposition = Decomposer::decompose_baseline("Some claim.");
        let report = analyzer.detect_errors("Some claim.", &decomposition).await.unwrap();
        assert_eq!(report.judgment, Judgment::Problematic);
        assert_eq!(report.errors.len(), 1);
    }
}
