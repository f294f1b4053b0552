//! Entailment verification of sub-claims against evidence, with per-evidence
//! scores combined by maximum.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::decomposer::{render_messages, DecomposeError, PromptLibrary};
use crate::gateway::{extract_target_logprob, ChatRequest, GatewayError, LlmGateway};
use crate::model::{ModelError, SubClaimScore};
use crate::retriever::EvidenceItem;

/// Each evidence snippet is truncated to this many characters before being
/// rendered into the few-shot prompt.
pub const SNIPPET_MAX_CHARS: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("evidence list is empty")]
    EmptyEvidence,
    #[error("verifier transport failure: {0}")]
    Transport(String),
    #[error("malformed verifier response: {0}")]
    MalformedResponse(String),
    #[error("verifier score out of range: {0}")]
    OutOfRange(String),
    #[error("could not parse verdict from response: {0:?}")]
    UnparseableVerdict(String),
    #[error("no fixture score for claim {0:?}")]
    FixtureMiss(String),
    #[error("fixture line {line}: {message}")]
    BadFixture { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Prompt(#[from] DecomposeError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifierBackend {
    #[serde(rename = "remote_nli")]
    RemoteNli,
    #[serde(rename = "llm_fewshot")]
    LlmFewShot,
    #[serde(rename = "fixture_table")]
    FixtureTable,
}

#[derive(Debug, Clone, Deserialize)]
pub struct VerifierConfig {
    pub backend: VerifierBackend,
    pub endpoint: Option<String>,
    pub model_id: Option<String>,
    pub fixture_path: Option<std::path::PathBuf>,
}

#[async_trait]
pub trait Verifier: Send + Sync {
    async fn score(
        &self,
        claim: &str,
        subclaim_index: usize,
        evidence: &[EvidenceItem],
    ) -> Result<SubClaimScore, VerifyError>;
    fn id(&self) -> String;
}

fn extract_score_value(body: &str) -> Result<f64, VerifyError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| VerifyError::MalformedResponse(e.to_string()))?;
    let score = value
        .get("score")
        .ok_or_else(|| VerifyError::MalformedResponse("missing \"score\" field".to_string()))?;
    let parsed = match score {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| VerifyError::MalformedResponse(format!("unusable score {score}")))?;
    if !parsed.is_finite() {
        return Err(VerifyError::OutOfRange(parsed.to_string()));
    }
    Ok(parsed.clamp(0.0, 1.0))
}

/// NLI endpoint client: POST {premise: evidence, hypothesis: claim}, expect
/// {score}. Finite scores are clamped to [0,1]; non-finite ones are errors.
pub struct RemoteNliVerifier {
    endpoint: String,
    http: reqwest::Client,
    limiter: Arc<Semaphore>,
}

impl RemoteNliVerifier {
    pub fn new(endpoint: impl Into<String>, limiter: Arc<Semaphore>) -> Self {
        RemoteNliVerifier {
            endpoint: endpoint.into(),
            http: reqwest::Client::new(),
            limiter,
        }
    }

    pub async fn score_pair(&self, claim: &str, evidence_text: &str) -> Result<f64, VerifyError> {
        let _permit = self
            .limiter
            .acquire()
            .await
            .map_err(|e| VerifyError::Transport(e.to_string()))?;
        let response = self
            .http
            .post(&self.endpoint)
            .json(&serde_json::json!({ "premise": evidence_text, "hypothesis": claim }))
            .send()
            .await
            .map_err(|e| VerifyError::Transport(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .await
            .map_err(|e| VerifyError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(VerifyError::Transport(format!("status {status}: {body}")));
        }
        extract_score_value(&body)
    }
}

#[async_trait]
impl Verifier for RemoteNliVerifier {
    async fn score(
        &self,
        claim: &str,
        subclaim_index: usize,
        evidence: &[EvidenceItem],
    ) -> Result<SubClaimScore, VerifyError> {
        if evidence.is_empty() {
            return Err(VerifyError::EmptyEvidence);
        }
        let mut per_evidence = Vec::with_capacity(evidence.len());
        for item in evidence {
            per_evidence.push(self.score_pair(claim, &item.text).await?);
        }
        Ok(SubClaimScore::from_per_evidence(subclaim_index, per_evidence, self.id())?)
    }

    fn id(&self) -> String {
        "remote_nli".to_string()
    }
}

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn evidence_block(evidence: &[EvidenceItem]) -> String {
    evidence
        .iter()
        .map(|item| {
            let snippet = truncate_chars(&item.text, SNIPPET_MAX_CHARS);
            if item.title.trim().is_empty() {
                format!("- {snippet}")
            } else {
                format!("- {}: {snippet}", item.title)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Few-shot classifier over the whole evidence list in one prompt. The score
/// is exp(logprob) of the matched target token ("supported" keeps p,
/// "unsupported" flips to 1-p); with no target token the cumulative logprob
/// is used and the verdict is read from the response text, checking
/// "unsupported" before "supported" since the former contains the latter.
pub struct LlmFewShotVerifier {
    gateway: Arc<LlmGateway>,
    prompts: PromptLibrary,
    model_id: String,
}

impl LlmFewShotVerifier {
    pub fn new(gateway: Arc<LlmGateway>, prompts: PromptLibrary, model_id: impl Into<String>) -> Self {
        LlmFewShotVerifier {
            gateway,
            prompts,
            model_id: model_id.into(),
        }
    }
}

#[async_trait]
impl Verifier for LlmFewShotVerifier {
    async fn score(
        &self,
        claim: &str,
        subclaim_index: usize,
        evidence: &[EvidenceItem],
    ) -> Result<SubClaimScore, VerifyError> {
        if evidence.is_empty() {
            return Err(VerifyError::EmptyEvidence);
        }
        let template = self.prompts.get("verify_fewshot")?;
        let block = evidence_block(evidence);
        let messages = render_messages(template, &[("claim", claim), ("evidence", block.as_str())]);
        let request = ChatRequest::new(self.model_id.clone(), messages).with_logprobs();
        let response = self.gateway.complete(&request).await?;
        let (target, logprob) = extract_target_logprob(&response, &["supported", "unsupported"])?;
        let p = logprob.exp().clamp(0.0, 1.0);
        let score = match target.as_deref() {
            Some("supported") => p,
            Some("unsupported") => 1.0 - p,
            _ => {
                let text = response.text.to_lowercase();
                if text.contains("unsupported") {
                    1.0 - p
                } else if text.contains("supported") {
                    p
                } else {
                    return Err(VerifyError::UnparseableVerdict(response.text));
                }
            }
        };
        Ok(SubClaimScore::from_per_evidence(subclaim_index, vec![score], self.id())?)
    }

    fn id(&self) -> String {
        "llm_fewshot".to_string()
    }
}

#[derive(Deserialize)]
struct FixtureLine {
    claim: String,
    #[serde(default)]
    evidence: Option<String>,
    score: f64,
}

/// Deterministic lookup table for tests and offline runs. Exact
/// (claim, evidence-text) pairs take priority, then a claim-only default.
pub struct FixtureVerifier {
    by_pair: HashMap<(String, String), f64>,
    by_claim: HashMap<String, f64>,
}

impl FixtureVerifier {
    pub fn from_path(path: &Path) -> Result<Self, VerifyError> {
        let file = std::fs::File::open(path)?;
        let mut by_pair = HashMap::new();
        let mut by_claim = HashMap::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FixtureLine = serde_json::from_str(&line).map_err(|e| VerifyError::BadFixture {
                line: i + 1,
                message: e.to_string(),
            })?;
            if !(0.0..=1.0).contains(&parsed.score) {
                return Err(VerifyError::BadFixture {
                    line: i + 1,
                    message: format!("score {} outside [0,1]", parsed.score),
                });
            }
            match parsed.evidence {
                Some(evidence) => {
                    by_pair.insert((parsed.claim, evidence), parsed.score);
                }
                None => {
                    by_claim.insert(parsed.claim, parsed.score);
                }
            }
        }
        Ok(FixtureVerifier { by_pair, by_claim })
    }

    pub fn from_entries(pairs: Vec<(String, Option<String>, f64)>) -> Self {
        let mut by_pair = HashMap::new();
        let mut by_claim = HashMap::new();
        for (claim, evidence, score) in pairs {
            match evidence {
                Some(e) => {
                    by_pair.insert((claim, e), score);
                }
                None => {
                    by_claim.insert(claim, score);
                }
            }
        }
        FixtureVerifier { by_pair, by_claim }
    }
}

#[async_trait]
impl Verifier for FixtureVerifier {
    async fn score(
        &self,
        claim: &str,
        subclaim_index: usize,
        evidence: &[EvidenceItem],
    ) -> Result<SubClaimScore, VerifyError> {
        if evidence.is_empty() {
            return Err(VerifyError::EmptyEvidence);
        }
        let mut per_evidence = Vec::with_capacity(evidence.len());
        for item in evidence {
            let score = self
                .by_pair
                .get(&(claim.to_string(), item.text.clone()))
                .or_else(|| self.by_claim.get(claim))
                .ok_or_else(|| VerifyError::FixtureMiss(claim.to_string()))?;
            per_evidence.push(*score);
        }
        Ok(SubClaimScore::from_per_evidence(subclaim_index, per_evidence, self.id())?)
    }

    fn id(&self) -> String {
        "fixture_table".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, ScriptedChatBackend, ScriptedReply, TokenLogprob};
    use approx::assert_relative_eq;

    fn item(title: &str, text: &str) -> EvidenceItem {
        EvidenceItem {
            title: title.to_string(),
            text: text.to_string(),
            source_uri: "u".to_string(),
            rank: 1,
            backend_score: None,
        }
    }

    #[test]
    fn truncation_is_char_safe() {
        let s = "é".repeat(1200);
        assert_eq!(truncate_chars(&s, SNIPPET_MAX_CHARS).chars().count(), 1000);
        assert_eq!(truncate_chars("short", SNIPPET_MAX_CHARS), "short");
    }

    #[test]
    fn evidence_block_formats_titles_and_truncates() {
        let long = "a".repeat(SNIPPET_MAX_CHARS + 50);
        let block = evidence_block(&[item("T", "body"), item("", &long)]);
        let lines: Vec<&str> = block.lines().collect();
        assert_eq!(lines[0], "- T: body");
        assert_eq!(lines[1].len(), 2 + SNIPPET_MAX_CHARS);
    }

    #[test]
    fn score_value_parses_clamps_and_rejects() {
        assert_eq!(extract_score_value("{\"score\":0.73}").unwrap(), 0.73);
        assert_eq!(extract_score_value("{\"score\":1.2}").unwrap(), 1.0);
        assert_eq!(extract_score_value("{\"score\":-0.2}").unwrap(), 0.0);
        assert!(matches!(
            extract_score_value("{\"score\":\"nan\"}"),
            Err(VerifyError::OutOfRange(_))
        ));
        assert!(matches!(
            extract_score_value("{\"other\":1}"),
            Err(VerifyError::MalformedResponse(_))
        ));
        assert!(matches!(
            extract_score_value("{\"score\":true}"),
            Err(VerifyError::MalformedResponse(_))
        ));
    }

    async fn spawn_nli_mock() -> (String, tokio::task::JoinHandle<()>) {
        use axum::{routing::post, Json, Router};
        let app = Router::new().route(
            "/nli",
            post(|Json(body): Json<serde_json::Value>| async move {
                let hypothesis = body["hypothesis"].as_str().unwrap_or_default();
                let premise = body["premise"].as_str().unwrap_or_default();
                let score: serde_json::Value = match (hypothesis, premise) {
                    (_, "strong evidence") => 0.9.into(),
                    (_, "weak evidence") => 0.2.into(),
                    (_, "medium evidence") => 0.5.into(),
                    ("overflow", _) => 1.2.into(),
                    ("broken", _) => "nan".into(),
                    _ => 0.73.into(),
                };
                Json(serde_json::json!({ "score": score }))
            }),
        );
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        (format!("http://{addr}/nli"), handle)
    }

    #[tokio::test]
    async fn remote_nli_combines_by_max() {
        let (endpoint, server) = spawn_nli_mock().await;
        let verifier = RemoteNliVerifier::new(endpoint, Arc::new(Semaphore::new(4)));
        let evidence = vec![
            item("a", "weak evidence"),
            item("b", "strong evidence"),
            item("c", "medium evidence"),
        ];
        let score = verifier.score("claim", 7, &evidence).await.unwrap();
        assert_eq!(score.per_evidence, vec![0.2, 0.9, 0.5]);
        assert_eq!(score.combined, 0.9);
        assert_eq!(score.subclaim_index, 7);
        assert_eq!(score.backend_id, "remote_nli");
        server.abort();
    }

    #[tokio::test]
    async fn remote_nli_clamps_and_rejects_nonfinite() {
        let (endpoint, server) = spawn_nli_mock().await;
        let verifier = RemoteNliVerifier::new(endpoint, Arc::new(Semaphore::new(4)));
        let single = verifier.score("overflow", 0, &[item("t", "x")]).await.unwrap();
        assert_eq!(single.combined, 1.0);
        assert!(matches!(
            verifier.score("broken", 0, &[item("t", "x")]).await,
            Err(VerifyError::OutOfRange(_))
        ));
        assert!(matches!(
            verifier.score("claim", 0, &[]).await,
            Err(VerifyError::EmptyEvidence)
        ));
        server.abort();
    }

    fn fewshot_with(replies: Vec<ScriptedReply>) -> LlmFewShotVerifier {
        let gateway = Arc::new(LlmGateway::new(
            Arc::new(ScriptedChatBackend::new(replies)),
            GatewayConfig::default(),
        ));
        LlmFewShotVerifier::new(gateway, PromptLibrary::builtin(), "verifier-model")
    }

    fn reply_with_tokens(needle: &str, text: &str, tokens: &[(&str, f64)]) -> ScriptedReply {
        ScriptedReply {
            needle: needle.to_string(),
            text: text.to_string(),
            token_logprobs: Some(
                tokens
                    .iter()
                    .map(|(t, lp)| TokenLogprob {
                        token: t.to_string(),
                        logprob: *lp,
                    })
                    .collect(),
            ),
        }
    }

    #[tokio::test]
    async fn fewshot_supported_token_keeps_probability() {
        let v = fewshot_with(vec![reply_with_tokens("claim A", "Supported", &[("Supported", -0.105)])]);
        let score = v.score("claim A", 0, &[item("t", "e")]).await.unwrap();
        assert_relative_eq!(score.combined, 0.9003, epsilon = 1e-4);
        assert_eq!(score.per_evidence.len(), 1);
    }

    #[tokio::test]
    async fn fewshot_unsupported_token_flips_probability() {
        let v = fewshot_with(vec![reply_with_tokens(
            "claim B",
            "Unsupported",
            &[("Unsupported", -0.223)],
        )]);
        let score = v.score("claim B", 0, &[item("t", "e")]).await.unwrap();
        assert_relative_eq!(score.combined, 0.1999, epsilon = 1e-4);
    }

    #[tokio::test]
    async fn fewshot_fallback_uses_cumulative_logprob_and_text() {
        let v = fewshot_with(vec![reply_with_tokens(
            "claim C",
            "Verdict: Unsupported.",
            &[("Ver", -0.1), ("dict", -0.05), ("wrong", -0.15)],
        )]);
        let score = v.score("claim C", 0, &[item("t", "e")]).await.unwrap();
        assert_relative_eq!(score.combined, 1.0 - (-0.3f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(score.combined, 0.2592, epsilon = 1e-4);

        let v = fewshot_with(vec![reply_with_tokens(
            "claim D",
            "It is supported.",
            &[("It", -0.1), ("is", -0.2)],
        )]);
        let score = v.score("claim D", 0, &[item("t", "e")]).await.unwrap();
        assert_relative_eq!(score.combined, (-0.3f64).exp(), epsilon = 1e-12);
    }

    #[tokio::test]
    async fn fewshot_checks_unsupported_before_supported_in_text() {
        // "unsupported" contains "supported"; the longer target must win.
        let v = fewshot_with(vec![reply_with_tokens(
            "claim E",
            "unsupported",
            &[("un", -0.2), ("sup", -0.2), ("ported", -0.2)],
        )]);
        let score = v.score("claim E", 0, &[item("t", "e")]).await.unwrap();
        assert_relative_eq!(score.combined, 1.0 - (-0.6f64).exp(), epsilon = 1e-12);
    }

    #[tokio::test]
    async fn fewshot_unparseable_verdict_is_an_error() {
        let v = fewshot_with(vec![reply_with_tokens("claim F", "who knows", &[("who", -0.1)])]);
        assert!(matches!(
            v.score("claim F", 0, &[item("t", "e")]).await,
            Err(VerifyError::UnparseableVerdict(_))
        ));
    }

    #[tokio::test]
    async fn fewshot_truncates_long_snippets_in_prompt() {
        let long_tail = format!("{}TRUNC", "a".repeat(SNIPPET_MAX_CHARS));
        // If truncation failed, the TRUNC needle would match first.
        let v = fewshot_with(vec![
            reply_with_tokens("TRUNC", "Unsupported", &[("Unsupported", -0.1)]),
            reply_with_tokens("### Claim", "Supported", &[("Supported", -0.1)]),
        ]);
        let score = v.score("claim G", 0, &[item("t", &long_tail)]).await.unwrap();
        assert!(score.combined > 0.5, "prompt must not contain the truncated tail");
    }

    #[tokio::test]
    async fn fewshot_threshold_property_on_mocked_logprobs() {
        for (token, lp) in [("Supported", -0.05), ("Supported", -1.2), ("Unsupported", -0.05), ("Unsupported", -1.2)] {
            let v = fewshot_with(vec![reply_with_tokens("claim H", token, &[(token, lp)])]);
            let score = v.score("claim H", 0, &[item("t", "e")]).await.unwrap().combined;
            let p = lp.exp();
            let expect_supported_side = (token == "Supported" && p > 0.5) || (token == "Unsupported" && p < 0.5);
            assert_eq!(score > 0.5, expect_supported_side, "token {token} lp {lp}");
        }
    }

    #[tokio::test]
    async fn fixture_pair_match_beats_claim_default() {
        let v = FixtureVerifier::from_entries(vec![
            ("c".to_string(), Some("e1".to_string()), 0.9),
            ("c".to_string(), None, 0.1),
        ]);
        let score = v.score("c", 0, &[item("t", "e1"), item("t", "e2")]).await.unwrap();
        assert_eq!(score.per_evidence, vec![0.9, 0.1]);
        assert_eq!(score.combined, 0.9);
    }

    #[tokio::test]
    async fn fixture_miss_is_an_error() {
        let v = FixtureVerifier::from_entries(vec![("c".to_string(), None, 0.5)]);
        assert!(matches!(
            v.score("other", 0, &[item("t", "e")]).await,
            Err(VerifyError::FixtureMiss(_))
        ));
    }

    #[test]
    fn fixture_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        std::fs::write(
            &path,
            "{\"claim\":\"c\",\"evidence\":\"e\",\"score\":0.8}\n{\"claim\":\"c\",\"score\":0.2}\n",
        )
        .unwrap();
        let v = FixtureVerifier::from_path(&path).unwrap();
        assert_eq!(v.by_pair.len(), 1);
        assert_eq!(v.by_claim.len(), 1);

        std::fs::write(&path, "{\"claim\":\"c\",\"score\":1.5}\n").unwrap();
        assert!(matches!(
            FixtureVerifier::from_path(&path),
            Err(VerifyError::BadFixture { line: 1, .. })
        ));
    }

    #[tokio::test]
    async fn single_evidence_is_identity() {
        let v = FixtureVerifier::from_entries(vec![("c".to_string(), None, 0.3)]);
        let score = v.score("c", 0, &[item("t", "e")]).await.unwrap();
        assert_eq!(score.combined, 0.3);
    }
}
