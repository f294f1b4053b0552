//! Decomposition of input text into sub-claims: prompt templates, output
//! parsing, exact-N decomposition and decontextualization.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::gateway::{ChatMessage, ChatRequest, GatewayError, LlmGateway};
use crate::model::{Decomposition, Method, ModelError};

pub const DECONTEXT_MARKER: &str = "### Decontextualized Response:";

/// Stems of the prompt assets compiled into the crate. A prompt directory may
/// override any of them with a `{stem}.toml` file of the same shape.
pub const PROMPT_STEMS: [&str; 8] = [
    "factscore",
    "veriscore",
    "wice",
    "exact_n",
    "decontextualize",
    "detect_errors",
    "reflect",
    "verify_fewshot",
];

#[derive(Debug, thiserror::Error)]
pub enum DecomposeError {
    #[error("model produced no sub-claims")]
    EmptyDecomposition,
    #[error("expected {expected} sub-claims, model produced {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("marker {DECONTEXT_MARKER:?} missing from model output")]
    MarkerMissing,
    #[error("exact-n count {0} out of range (expected 2..=10)")]
    InvalidN(usize),
    #[error("method {0} is not handled by this operation")]
    UnsupportedMethod(String),
    #[error("prompt template {name}: {problem}")]
    Template { name: String, problem: String },
    #[error("prompt io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Deserialize)]
pub struct Demonstration {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub system: String,
    pub user_template: String,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
}

fn required_placeholders(name: &str) -> &'static [&'static str] {
    match name {
        "factscore" | "veriscore" | "wice" => &["{input_text}"],
        "exact_n" => &["{input_text}", "{num_sub_claims}"],
        "decontextualize" => &["{question}", "{response}"],
        "detect_errors" | "reflect" => &["{input_text}", "{decomposition}"],
        "verify_fewshot" => &["{claim}", "{evidence}"],
        _ => &[],
    }
}

impl PromptTemplate {
    fn validate(&self) -> Result<(), DecomposeError> {
        for placeholder in required_placeholders(&self.name) {
            if !self.user_template.contains(placeholder) {
                return Err(DecomposeError::Template {
                    name: self.name.clone(),
                    problem: format!("user_template is missing {placeholder}"),
                });
            }
        }
        Ok(())
    }
}

/// Substitute `{key}` placeholders. Keys absent from `vars` are left as-is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.trim().to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Assemble the chat message list: system, then each demonstration as a
/// user/assistant pair, then the rendered instance as the final user message.
pub fn render_messages(template: &PromptTemplate, vars: &[(&str, &str)]) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(template.system.trim())];
    for demo in &template.demonstrations {
        messages.push(ChatMessage::user(demo.input.trim()));
        messages.push(ChatMessage::assistant(demo.output.trim()));
    }
    messages.push(ChatMessage::user(render(&template.user_template, vars)));
    messages
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, PromptTemplate>,
}

impl PromptLibrary {
    /// The templates compiled into the crate.
    pub fn builtin() -> Self {
        let sources: [(&str, &str); 8] = [
            ("factscore", include_str!("../assets/prompts/factscore.toml")),
            ("veriscore", include_str!("../assets/prompts/veriscore.toml")),
            ("wice", include_str!("../assets/prompts/wice.toml")),
            ("exact_n", include_str!("../assets/prompts/exact_n.toml")),
            (
                "decontextualize",
                include_str!("../assets/prompts/decontextualize.toml"),
            ),
            (
                "detect_errors",
                include_str!("../assets/prompts/detect_errors.toml"),
            ),
            ("reflect", include_str!("../assets/prompts/reflect.toml")),
            (
                "verify_fewshot",
                include_str!("../assets/prompts/verify_fewshot.toml"),
            ),
        ];
        let mut templates = BTreeMap::new();
        for (stem, source) in sources {
            let template: PromptTemplate =
                toml::from_str(source).unwrap_or_else(|e| panic!("builtin prompt {stem}: {e}"));
            template
                .validate()
                .unwrap_or_else(|e| panic!("builtin prompt {stem}: {e}"));
            templates.insert(stem.to_string(), template);
        }
        PromptLibrary { templates }
    }

    /// Builtin templates with per-stem overrides from `dir`. Files other than
    /// the known stems are ignored.
    pub fn from_dir(dir: &Path) -> Result<Self, DecomposeError> {
        let mut library = Self::builtin();
        for stem in PROMPT_STEMS {
            let path = dir.join(format!("{stem}.toml"));
            if !path.exists() {
                continue;
            }
            let source = std::fs::read_to_string(&path)?;
            let template: PromptTemplate =
                toml::from_str(&source).map_err(|e| DecomposeError::Template {
                    name: stem.to_string(),
                    problem: e.to_string(),
                })?;
            template.validate()?;
            library.templates.insert(stem.to_string(), template);
        }
        Ok(library)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, DecomposeError> {
        self.templates.get(name).ok_or_else(|| DecomposeError::Template {
            name: name.to_string(),
            problem: "unknown template".to_string(),
        })
    }
}

/// Extract the bodies of triple-backtick fenced blocks, one item per block.
pub fn parse_fenced_blocks(raw: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(body) => {
                    let text = body.join("\n").trim().to_string();
                    if !text.is_empty() {
                        blocks.push(text);
                    }
                }
                None => current = Some(Vec::new()),
            }
            continue;
        }
        if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }
    blocks
}

fn strip_bullet(line: &str) -> Option<&str> {
    let trimmed = line.trim();
    if let Some(rest) = trimmed.strip_prefix("- ").or_else(|| trimmed.strip_prefix("* ")) {
        return Some(rest.trim());
    }
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        if let Some(rest) = trimmed[digits..].strip_prefix(". ") {
            return Some(rest.trim());
        }
    }
    None
}

fn parse_bullets(raw: &str) -> Vec<String> {
    raw.lines()
        .filter_map(strip_bullet)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Parse model output into sub-claims. Triple-backtick fenced blocks take
/// priority, one sub-claim per block; a fenced block consisting entirely of
/// bullet lines is expanded into its bullets. Otherwise bullet ("- ", "* ")
/// and numbered ("1. ") lines are taken. Anything else parses to an empty
/// list.
pub fn parse_subclaims(raw: &str) -> Vec<String> {
    let blocks = parse_fenced_blocks(raw);
    if !blocks.is_empty() {
        let mut items = Vec::new();
        for block in blocks {
            let lines: Vec<&str> = block.lines().filter(|l| !l.trim().is_empty()).collect();
            if !lines.is_empty() && lines.iter().all(|l| strip_bullet(l).is_some()) {
                items.extend(parse_bullets(&block));
            } else {
                items.push(block);
            }
        }
        return items;
    }
    parse_bullets(raw)
}

/// Split text into sentences at '.', '!' or '?' followed by whitespace or end
/// of input. Deliberately simple and deterministic; abbreviations are not
/// special-cased.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let sentence = current.trim();
            if !sentence.is_empty() {
                sentences.push(sentence.to_string());
            }
            current.clear();
        }
    }
    let tail = current.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

/// Whether entries are single claims or whole model responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Claim,
    Response,
}

pub fn dataset_granularity(dataset_id: &str) -> Granularity {
    match dataset_id {
        "felm" | "bingchat" => Granularity::Response,
        _ => Granularity::Claim,
    }
}

fn dedup_keep_first(items: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

const VERISCORE_WINDOW: usize = 3;

pub struct Decomposer {
    gateway: Arc<LlmGateway>,
    prompts: PromptLibrary,
    model_id: String,
}

impl Decomposer {
    pub fn new(gateway: Arc<LlmGateway>, prompts: PromptLibrary, model_id: impl Into<String>) -> Self {
        Decomposer {
            gateway,
            prompts,
            model_id: model_id.into(),
        }
    }

    /// No decomposition: the trimmed input is the single sub-claim. `text`
    /// must be nonempty.
    pub fn decompose_baseline(text: &str) -> Decomposition {
        Decomposition::new(Method::Baseline, "baseline", vec![text.to_string()])
            .expect("baseline decomposition of nonempty text")
    }

    async fn prompt_for_subclaims(
        &self,
        template_name: &str,
        text: &str,
    ) -> Result<Vec<String>, DecomposeError> {
        let template = self.prompts.get(template_name)?;
        let messages = render_messages(template, &[("input_text", text)]);
        let response = self
            .gateway
            .complete(&ChatRequest::new(self.model_id.clone(), messages))
            .await?;
        Ok(parse_subclaims(&response.text))
    }

    /// Decompose via FactScore, VeriScore or Wice. For response-level input,
    /// VeriScore prompts a moving window of 3 sentences with stride 1 and
    /// merges the per-window sub-claims in order.
    pub async fn decompose(
        &self,
        text: &str,
        method: &Method,
        granularity: Granularity,
    ) -> Result<Decomposition, DecomposeError> {
        let template_name = match method {
            Method::FactScore => "factscore",
            Method::VeriScore => "veriscore",
            Method::Wice => "wice",
            other => return Err(DecomposeError::UnsupportedMethod(other.name())),
        };
        let chunks: Vec<String> =
            if *method == Method::VeriScore && granularity == Granularity::Response {
                let sentences = split_sentences(text);
                if sentences.len() <= VERISCORE_WINDOW {
                    vec![text.trim().to_string()]
                } else {
                    (0..=sentences.len() - VERISCORE_WINDOW)
                        .map(|i| sentences[i..i + VERISCORE_WINDOW].join(" "))
                        .collect()
                }
            } else {
                vec![text.trim().to_string()]
            };
        let mut subclaims = Vec::new();
        for chunk in &chunks {
            subclaims.extend(self.prompt_for_subclaims(template_name, chunk).await?);
        }
        let subclaims = dedup_keep_first(subclaims);
        if subclaims.is_empty() {
            return Err(DecomposeError::EmptyDecomposition);
        }
        Ok(Decomposition::new(method.clone(), &self.model_id, subclaims)?)
    }

    /// Decompose into exactly `n` fenced claims, retrying once with a
    /// corrective message on a count mismatch.
    pub async fn decompose_exact_n(&self, text: &str, n: usize) -> Result<Decomposition, DecomposeError> {
        if !(2..=10).contains(&n) {
            return Err(DecomposeError::InvalidN(n));
        }
        let template = self.prompts.get("exact_n")?;
        let n_str = n.to_string();
        let vars = [("input_text", text), ("num_sub_claims", n_str.as_str())];
        let mut messages = render_messages(template, &vars);
        let first = self
            .gateway
            .complete(&ChatRequest::new(self.model_id.clone(), messages.clone()))
            .await?;
        let claims = dedup_keep_first(parse_fenced_blocks(&first.text));
        if claims.len() == n {
            return Ok(Decomposition::new(Method::ExactN(n), &self.model_id, claims)?);
        }
        messages.push(ChatMessage::assistant(first.text));
        messages.push(ChatMessage::user(format!(
            "Your previous response contained {} claims, but exactly {n} are required. \
             Please provide exactly {n} claims, each enclosed with triple backticks.",
            claims.len()
        )));
        let second = self
            .gateway
            .complete(&ChatRequest::new(self.model_id.clone(), messages))
            .await?;
        let claims = dedup_keep_first(parse_fenced_blocks(&second.text));
        if claims.len() != n {
            return Err(DecomposeError::CountMismatch {
                expected: n,
                got: claims.len(),
            });
        }
        Ok(Decomposition::new(Method::ExactN(n), &self.model_id, claims)?)
    }

    /// Rewrite a response to be interpretable without its question.
    pub async fn decontextualize(&self, question: &str, response: &str) -> Result<String, DecomposeError> {
        let template = self.prompts.get("decontextualize")?;
        let messages = render_messages(template, &[("question", question), ("response", response)]);
        let reply = self
            .gateway
            .complete(&ChatRequest::new(self.model_id.clone(), messages))
            .await?;
        let Some(at) = reply.text.find(DECONTEXT_MARKER) else {
            return Err(DecomposeError::MarkerMissing);
        };
        Ok(reply.text[at + DECONTEXT_MARKER.len()..].trim().to_string())
    }

    pub fn prompts(&self) -> &PromptLibrary {
        &self.prompts
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, ScriptedChatBackend, ScriptedReply};

    fn gateway_with(replies: Vec<ScriptedReply>) -> Arc<LlmGateway> {
        Arc::new(LlmGateway::new(
            Arc::new(ScriptedChatBackend::new(replies)),
            GatewayConfig::default(),
        ))
    }

    fn reply(needle: &str, text: &str) -> ScriptedReply {
        ScriptedReply {
            needle: needle.to_string(),
            text: text.to_string(),
            token_logprobs: None,
        }
    }

    fn decomposer(replies: Vec<ScriptedReply>) -> Decomposer {
        Decomposer::new(gateway_with(replies), PromptLibrary::builtin(), "test-model")
    }

    #[test]
    fn parse_subclaims_fenced_blocks() {
        assert_eq!(parse_subclaims("```\nA\n```\n```\nB\n```"), vec!["A", "B"]);
    }

    #[test]
    fn parse_subclaims_bullets_drop_empty() {
        assert_eq!(parse_subclaims("- A\n- B\n- "), vec!["A", "B"]);
        assert_eq!(parse_subclaims("* A\n* B"), vec!["A", "B"]);
    }

    #[test]
    fn parse_subclaims_numbered() {
        assert_eq!(parse_subclaims("1. A\n2. B"), vec!["A", "B"]);
    }

    #[test]
    fn parse_subclaims_fenced_bullet_block_expands() {
        assert_eq!(parse_subclaims("```\n- A\n- B\n```"), vec!["A", "B"]);
    }

    #[test]
    fn parse_subclaims_prose_is_empty() {
        assert!(parse_subclaims("No list here, just prose.").is_empty());
        assert!(parse_subclaims("").is_empty());
    }

    #[test]
    fn parse_subclaims_idempotent_on_rendered_bullets() {
        let items = parse_subclaims("- A\n- B\n- C");
        let rendered = items.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n");
        assert_eq!(parse_subclaims(&rendered), items);
    }

    #[test]
    fn split_sentences_handles_terminators() {
        assert_eq!(
            split_sentences("One fact. Two facts! Three? Four"),
            vec!["One fact.", "Two facts!", "Three?", "Four"]
        );
        assert_eq!(split_sentences("Single sentence."), vec!["Single sentence."]);
        assert!(split_sentences("").is_empty());
    }

    #[test]
    fn builtin_library_has_all_templates() {
        let lib = PromptLibrary::builtin();
        for stem in PROMPT_STEMS {
            assert!(lib.get(stem).is_ok(), "missing builtin template {stem}");
        }
        assert!(lib.get("nope").is_err());
    }

    #[test]
    fn from_dir_overrides_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("wice.toml"),
            "name = \"wice\"\nsystem = \"custom system\"\nuser_template = \"{input_text}\"\n",
        )
        .unwrap();
        let lib = PromptLibrary::from_dir(dir.path()).unwrap();
        assert_eq!(lib.get("wice").unwrap().system, "custom system");
        assert!(lib.get("factscore").unwrap().system.contains("independent facts"));
    }

    #[test]
    fn from_dir_rejects_template_without_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("wice.toml"),
            "name = \"wice\"\nsystem = \"s\"\nuser_template = \"no placeholder\"\n",
        )
        .unwrap();
        assert!(matches!(
            PromptLibrary::from_dir(dir.path()),
            Err(DecomposeError::Template { .. })
        ));
    }

    #[test]
    fn render_messages_interleaves_demonstrations() {
        let lib = PromptLibrary::builtin();
        let template = lib.get("factscore").unwrap();
        let messages = render_messages(template, &[("input_text", "The sky is blue.")]);
        assert_eq!(messages[0].role, "system");
        assert_eq!(messages[1].role, "user");
        assert_eq!(messages[2].role, "assistant");
        let last = messages.last().unwrap();
        assert_eq!(last.role, "user");
        assert!(last.content.contains("The sky is blue."));
        assert!(!last.content.contains("{input_text}"));
    }

    #[test]
    fn baseline_is_identity_modulo_trim() {
        let d = Decomposer::decompose_baseline("  A claim.  ");
        assert_eq!(d.texts(), vec!["A claim."]);
        assert_eq!(d.method, Method::Baseline);
        assert_eq!(d.model_id, "baseline");
        let multi = Decomposer::decompose_baseline("First. Second. Third.");
        assert_eq!(multi.subclaims.len(), 1);
    }

    #[tokio::test]
    async fn decompose_parses_bullets() {
        let d = decomposer(vec![reply("blue", "- Fact one.\n- Fact two.")]);
        let result = d
            .decompose("The sky is blue.", &Method::FactScore, Granularity::Claim)
            .await
            .unwrap();
        assert_eq!(result.texts(), vec!["Fact one.", "Fact two."]);
        assert_eq!(result.method, Method::FactScore);
        assert_eq!(result.model_id, "test-model");
    }

    #[tokio::test]
    async fn decompose_empty_output_is_an_error() {
        let d = decomposer(vec![reply("blue", "")]);
        let err = d
            .decompose("The sky is blue.", &Method::FactScore, Granularity::Claim)
            .await
            .unwrap_err();
        assert!(matches!(err, DecomposeError::EmptyDecomposition));
    }

    #[tokio::test]
    async fn decompose_rejects_unsupported_methods() {
        let d = decomposer(vec![]);
        let err = d
            .decompose("text", &Method::Baseline, Granularity::Claim)
            .await
            .unwrap_err();
        assert!(matches!(err, DecomposeError::UnsupportedMethod(_)));
    }

    #[tokio::test]
    async fn veriscore_claim_level_prompts_whole_text() {
        let d = decomposer(vec![reply("One. Two. Three. Four. Five.", "- whole")]);
        let result = d
            .decompose(
                "One. Two. Three. Four. Five.",
                &Method::VeriScore,
                Granularity::Claim,
            )
            .await
            .unwrap();
        assert_eq!(result.texts(), vec!["whole"]);
    }

    #[tokio::test]
    async fn veriscore_response_level_uses_moving_window() {
        // 5 sentences -> windows [1..3], [2..4], [3..5]; duplicates merged
        // keeping first occurrence.
        let d = decomposer(vec![
            reply("One. Two. Three.", "- a\n- b"),
            reply("Two. Three. Four.", "- b\n- c"),
            reply("Three. Four. Five.", "- c\n- d"),
        ]);
        let result = d
            .decompose(
                "One. Two. Three. Four. Five.",
                &Method::VeriScore,
                Granularity::Response,
            )
            .await
            .unwrap();
        assert_eq!(result.texts(), vec!["a", "b", "c", "d"]);
    }

    #[tokio::test]
    async fn veriscore_short_response_is_one_chunk() {
        let d = decomposer(vec![reply("One. Two. Three.", "- a")]);
        let result = d
            .decompose("One. Two. Three.", &Method::VeriScore, Granularity::Response)
            .await
            .unwrap();
        assert_eq!(result.texts(), vec!["a"]);
    }

    #[tokio::test]
    async fn exact_n_accepts_matching_count() {
        let d = decomposer(vec![reply(
            "Input Text",
            "### Claims\n```\nA\n```\n\n```\nB\n```\n\n```\nC\n```",
        )]);
        let result = d.decompose_exact_n("text", 3).await.unwrap();
        assert_eq!(result.texts(), vec!["A", "B", "C"]);
        assert_eq!(result.method, Method::ExactN(3));
    }

    #[tokio::test]
    async fn exact_n_retries_once_then_fails() {
        let two_blocks = "```\nA\n```\n```\nB\n```";
        let d = decomposer(vec![
            reply("Input Text", two_blocks),
            reply("previous response contained", two_blocks),
        ]);
        let err = d.decompose_exact_n("text", 3).await.unwrap_err();
        assert!(matches!(err, DecomposeError::CountMismatch { expected: 3, got: 2 }));
    }

    #[tokio::test]
    async fn exact_n_retry_can_recover() {
        let d = decomposer(vec![
            reply("Input Text", "```\nA\n```"),
            reply("previous response contained", "```\nA\n```\n```\nB\n```\n```\nC\n```"),
        ]);
        let result = d.decompose_exact_n("text", 3).await.unwrap();
        assert_eq!(result.texts(), vec!["A", "B", "C"]);
    }

    #[tokio::test]
    async fn exact_n_bounds_are_enforced() {
        let d = decomposer(vec![]);
        assert!(matches!(d.decompose_exact_n("t", 1).await, Err(DecomposeError::InvalidN(1))));
        assert!(matches!(d.decompose_exact_n("t", 11).await, Err(DecomposeError::InvalidN(11))));
    }

    #[tokio::test]
    async fn decontextualize_extracts_marker_tail() {
        let d = decomposer(vec![reply(
            "smallest ocean",
            "### Decontextualized Response:\nThe Arctic Ocean is smallest.",
        )]);
        let out = d
            .decontextualize("Which ocean is smallest?", "It is the smallest ocean.")
            .await
            .unwrap();
        assert_eq!(out, "The Arctic Ocean is smallest.");
    }

    #[tokio::test]
    async fn decontextualize_keeps_multi_paragraph_tail() {
        let d = decomposer(vec![reply(
            "Question",
            "preamble\n### Decontextualized Response:\nFirst paragraph.\n\nSecond paragraph.",
        )]);
        let out = d.decontextualize("q", "r").await.unwrap();
        assert_eq!(out, "First paragraph.\n\nSecond paragraph.");
    }

    #[tokio::test]
    async fn decontextualize_missing_marker_is_an_error() {
        let d = decomposer(vec![reply("Question", "no marker here")]);
        assert!(matches!(
            d.decontextualize("q", "r").await,
            Err(DecomposeError::MarkerMissing)
        ));
    }

    #[test]
    fn granularity_by_dataset() {
        assert_eq!(dataset_granularity("felm"), Granularity::Response);
        assert_eq!(dataset_granularity("bingchat"), Granularity::Response);
        assert_eq!(dataset_granularity("wice"), Granularity::Claim);
        assert_eq!(dataset_granularity("claimdecomp"), Granularity::Claim);
        assert_eq!(dataset_granularity("other"), Granularity::Claim);
    }
}
