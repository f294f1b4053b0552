//! Evidence retrieval: deterministic fixture corpus, web-search API client,
//! and remote-embedding vector index.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub const FIXTURE_TOP_K: usize = 3;
pub const WEB_SEARCH_TOP_K: usize = 10;
pub const VECTOR_TOP_K: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("fixture corpus has no documents")]
    EmptyCorpus,
    #[error("retrieval backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed search response: {0}")]
    MalformedSearchResponse(String),
    #[error("corpus line {line}: {message}")]
    BadCorpus { line: usize, message: String },
    #[error("vector index: {0}")]
    BadIndex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub title: String,
    pub text: String,
    pub source_uri: String,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub backend_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverBackend {
    Fixture,
    WebSearch,
    VectorIndex,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RetrieverConfig {
    pub backend: RetrieverBackend,
    pub top_k: Option<usize>,
    pub corpus_path: Option<std::path::PathBuf>,
    pub index_path: Option<std::path::PathBuf>,
    pub endpoint: Option<String>,
    pub key_env: Option<String>,
    pub embed_model: Option<String>,
}

#[async_trait]
pub trait Retriever: Send + Sync {
    async fn retrieve(&self, query: &str) -> Result<Vec<EvidenceItem>, RetrieveError>;
    fn id(&self) -> String;
}

fn tokens(s: &str) -> HashSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Case-folded token-type overlap count between query and document.
pub fn lexical_score(query: &str, document: &str) -> f64 {
    let q = tokens(query);
    let d = tokens(document);
    q.intersection(&d).count() as f64
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDoc>, RetrieveError> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusDoc = serde_json::from_str(&line).map_err(|e| RetrieveError::BadCorpus {
            line: i + 1,
            message: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(RetrieveError::BadCorpus {
                line: i + 1,
                message: "text is empty".to_string(),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(RetrieveError::BadCorpus {
                line: i + 1,
                message: format!("duplicate doc_id {:?}", doc.doc_id),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Lexical retrieval over an in-memory corpus. Ordering is total: descending
/// score, then ascending doc_id, so results are deterministic even with zero
/// overlap everywhere.
pub struct FixtureRetriever {
    corpus: Vec<CorpusDoc>,
    top_k: usize,
}

impl FixtureRetriever {
    pub fn new(corpus: Vec<CorpusDoc>, top_k: Option<usize>) -> Self {
        FixtureRetriever {
            corpus,
            top_k: top_k.unwrap_or(FIXTURE_TOP_K).max(1),
        }
    }

    pub fn from_path(path: &Path, top_k: Option<usize>) -> Result<Self, RetrieveError> {
        Ok(Self::new(load_corpus(path)?, top_k))
    }
}

#[async_trait]
impl Retriever for FixtureRetriever {
    async fn retrieve(&self, query: &str) -> Result<Vec<EvidenceItem>, RetrieveError> {
        if query.trim().is_empty() {
            return Err(RetrieveError::EmptyQuery);
        }
        if self.corpus.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        let mut scored: Vec<(f64, &CorpusDoc)> = self
            .corpus
            .iter()
            .map(|doc| (lexical_score(query, &format!("{} {}", doc.title, doc.text)), doc))
            .collect();
        scored.sort_by(|(sa, da), (sb, db)| {
            sb.partial_cmp(sa).unwrap().then_with(|| da.doc_id.cmp(&db.doc_id))
        });
        Ok(scored
            .into_iter()
            .take(self.top_k)
            .enumerate()
            .map(|(i, (score, doc))| EvidenceItem {
                title: doc.title.clone(),
                text: doc.text.clone(),
                source_uri: doc.doc_id.clone(),
                rank: i + 1,
                backend_score: Some(score),
            })
            .collect())
    }

    fn id(&self) -> String {
        "fixture".to_string()
    }
}

#[derive(Deserialize)]
struct SearchWireItem {
    #[serde(default)]
    title: String,
    #[serde(default)]
    snippet: String,
    #[serde(default)]
    link: String,
}

/// Map a search API body to evidence: organic[i] becomes an item with the
/// snippet as text and rank i+1.
pub fn parse_search_response(body: &str) -> Result<Vec<EvidenceItem>, RetrieveError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| RetrieveError::MalformedSearchResponse(e.to_string()))?;
    let organic = value
        .get("organic")
        .ok_or_else(|| RetrieveError::MalformedSearchResponse("missing \"organic\" field".to_string()))?;
    let items: Vec<SearchWireItem> = serde_json::from_value(organic.clone())
        .map_err(|e| RetrieveError::MalformedSearchResponse(e.to_string()))?;
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(i, item)| EvidenceItem {
            title: item.title,
            text: item.snippet,
            source_uri: item.link,
            rank: i + 1,
            backend_score: None,
        })
        .collect())
}

/// Search API client: POST {q, num} with the key in an X-API-KEY header,
/// sharing the gateway's in-flight budget.
pub struct WebSearchRetriever {
    endpoint: String,
    api_key: Option<String>,
    top_k: usize,
    http: reqwest::Client,
    limiter: Arc<Semaphore>,
}

impl WebSearchRetriever {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        top_k: Option<usize>,
        limiter: Arc<Semaphore>,
    ) -> Self {
        WebSearchRetriever {
            endpoint: endpoint.into(),
            api_key,
            top_k: top_k.unwrap_or(WEB_SEARCH_TOP_K).max(1),
            http: reqwest::Client::new(),
            limiter,
        }
    }
}

#[async_trait]
impl Retriever for WebSearchRetriever {
    async fn retrieve(&self, query: &str) -> Result<Vec<EvidenceItem>, RetrieveError> {
        if query.trim().is_empty() {
            return Err(RetrieveError::EmptyQuery);
        }
        let _permit = self
            .limiter
            .acquire()
            .await
            .map_err(|e| RetrieveError::BackendUnavailable(e.to_string()))?;
        let mut req = self
            .http
            .post(&self.endpoint)
            .json(&serde_json::json!({ "q": query, "num": self.top_k }));
        if let Some(key) = &self.api_key {
            req = req.header("X-API-KEY", key);
        }
        let response = req
            .send()
            .await
            .map_err(|e| RetrieveError::BackendUnavailable(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .await
            .map_err(|e| RetrieveError::BackendUnavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(RetrieveError::BackendUnavailable(format!("status {status}: {body}")));
        }
        let mut items = parse_search_response(&body)?;
        items.truncate(self.top_k);
        Ok(items)
    }

    fn id(&self) -> String {
        "web_search".to_string()
    }
}

/// Write a flat vector index: u32 LE dimension, then per record a u32 LE id
/// length, the id bytes, and dim f32 LE components.
pub fn write_vector_index(path: &Path, dim: u32, records: &[(String, Vec<f32>)]) -> Result<(), RetrieveError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&dim.to_le_bytes())?;
    for (id, vector) in records {
        if vector.len() != dim as usize {
            return Err(RetrieveError::BadIndex(format!(
                "record {id:?} has {} components, index dimension is {dim}",
                vector.len()
            )));
        }
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        for component in vector {
            out.write_all(&component.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_vector_index(path: &Path) -> Result<(u32, Vec<(String, Vec<f32>)>), RetrieveError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut u32_buf = [0u8; 4];
    file.read_exact(&mut u32_buf)
        .map_err(|_| RetrieveError::BadIndex("missing dimension header".to_string()))?;
    let dim = u32::from_le_bytes(u32_buf);
    if dim == 0 {
        return Err(RetrieveError::BadIndex("dimension is zero".to_string()));
    }
    let mut records = Vec::new();
    loop {
        match file.read_exact(&mut u32_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let id_len = u32::from_le_bytes(u32_buf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        file.read_exact(&mut id_bytes)
            .map_err(|_| RetrieveError::BadIndex("truncated record id".to_string()))?;
        let id = String::from_utf8(id_bytes)
            .map_err(|e| RetrieveError::BadIndex(format!("record id not utf-8: {e}")))?;
        let mut vector = Vec::with_capacity(dim as usize);
        for _ in 0..dim {
            let mut f_buf = [0u8; 4];
            file.read_exact(&mut f_buf)
                .map_err(|_| RetrieveError::BadIndex(format!("truncated vector for {id:?}")))?;
            vector.push(f32::from_le_bytes(f_buf));
        }
        records.push((id, vector));
    }
    Ok((dim, records))
}

/// Cosine similarity accumulated in f64; zero-norm vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        norm_a += (*x as f64).powi(2);
        norm_b += (*y as f64).powi(2);
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    dot / (norm_a.sqrt() * norm_b.sqrt())
}

#[derive(Deserialize)]
struct EmbeddingWire {
    data: Vec<EmbeddingWireItem>,
}

#[derive(Deserialize)]
struct EmbeddingWireItem {
    embedding: Vec<f32>,
}

/// Exact-search vector retriever: embeds the query via a remote embeddings
/// endpoint and ranks corpus documents by cosine similarity.
pub struct VectorIndexRetriever {
    dim: u32,
    index: Vec<(String, Vec<f32>)>,
    docs: HashMap<String, CorpusDoc>,
    endpoint: String,
    api_key: Option<String>,
    embed_model: String,
    top_k: usize,
    http: reqwest::Client,
    limiter: Arc<Semaphore>,
}

impl VectorIndexRetriever {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index_path: &Path,
        corpus_path: &Path,
        endpoint: impl Into<String>,
        api_key: Option<String>,
        embed_model: impl Into<String>,
        top_k: Option<usize>,
        limiter: Arc<Semaphore>,
    ) -> Result<Self, RetrieveError> {
        let (dim, index) = read_vector_index(index_path)?;
        let docs: HashMap<String, CorpusDoc> = load_corpus(corpus_path)?
            .into_iter()
            .map(|d| (d.doc_id.clone(), d))
            .collect();
        for (id, _) in &index {
            if !docs.contains_key(id) {
                return Err(RetrieveError::BadIndex(format!(
                    "indexed id {id:?} has no corpus document"
                )));
            }
        }
        Ok(VectorIndexRetriever {
            dim,
            index,
            docs,
            endpoint: endpoint.into(),
            api_key,
            embed_model: embed_model.into(),
            top_k: top_k.unwrap_or(VECTOR_TOP_K).max(1),
            http: reqwest::Client::new(),
            limiter,
        })
    }

    async fn embed(&self, text: &str) -> Result<Vec<f32>, RetrieveError> {
        let _permit = self
            .limiter
            .acquire()
            .await
            .map_err(|e| RetrieveError::BackendUnavailable(e.to_string()))?;
        let mut req = self.http.post(&self.endpoint).json(&serde_json::json!({
            "model": self.embed_model,
            "input": [text],
        }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let response = req
            .send()
            .await
            .map_err(|e| RetrieveError::BackendUnavailable(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .await
            .map_err(|e| RetrieveError::BackendUnavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(RetrieveError::BackendUnavailable(format!("status {status}: {body}")));
        }
        let wire: EmbeddingWire = serde_json::from_str(&body)
            .map_err(|e| RetrieveError::MalformedSearchResponse(e.to_string()))?;
        let embedding = wire
            .data
            .into_iter()
            .next()
            .ok_or_else(|| RetrieveError::MalformedSearchResponse("empty embeddings data".to_string()))?
            .embedding;
        if embedding.len() != self.dim as usize {
            return Err(RetrieveError::BadIndex(format!(
                "query embedding has {} components, index dimension is {}",
                embedding.len(),
                self.dim
            )));
        }
        Ok(embedding)
    }
}

#[async_trait]
impl Retriever for VectorIndexRetriever {
    async fn retrieve(&self, query: &str) -> Result<Vec<EvidenceItem>, RetrieveError> {
        if query.trim().is_empty() {
            return Err(RetrieveError::EmptyQuery);
        }
        if self.index.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        let query_vec = self.embed(query).await?;
        let mut scored: Vec<(f64, &str)> = self
            .index
            .iter()
            .map(|(id, vec)| (cosine(&query_vec, vec), id.as_str()))
            .collect();
        scored.sort_by(|(sa, ia), (sb, ib)| sb.partial_cmp(sa).unwrap().then_with(|| ia.cmp(ib)));
        Ok(scored
            .into_iter()
            .take(self.top_k)
            .enumerate()
            .map(|(i, (score, id))| {
                let doc = &self.docs[id];
                EvidenceItem {
                    title: doc.title.clone(),
                    text: doc.text.clone(),
                    source_uri: doc.doc_id.clone(),
                    rank: i + 1,
                    backend_score: Some(score),
                }
            })
            .collect())
    }

    fn id(&self) -> String {
        "vector_index".to_string()
    }
}
