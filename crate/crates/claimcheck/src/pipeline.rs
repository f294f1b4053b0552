//! End-to-end orchestration: decompose, retrieve, verify, aggregate. Entries
//! run with bounded parallelism; output is ordered by entry id regardless of
//! completion order, and per-entry failures are recorded rather than fatal.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate, AggregateError, AggregatorConfig};
use crate::decomposer::{dataset_granularity, DecomposeError, Decomposer};
use crate::error_analysis::{AnalysisError, Analyzer};
use crate::evaluation::EvalError;
use crate::model::{DatasetEntry, Decomposition, Label, Method, ModelError, PipelineRecord};
use crate::retriever::{RetrieveError, Retriever};
use crate::verifier::{VerifyError, Verifier};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("reflected methods require an analyzer")]
    MissingAnalyzer,
}

/// One JSONL output line per dataset entry. Failed entries keep their gold
/// label and the error message but no scores, and are skipped by metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub entry_id: String,
    pub dataset_id: String,
    pub status: String,
    pub gold: Label,
    pub method: String,
    pub verifier: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_subclaims: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subclaims: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub complexity: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

fn entry_complexity(entry: &DatasetEntry) -> Option<u32> {
    entry.meta.get("complexity").and_then(|s| s.parse().ok())
}

impl RunLine {
    pub fn ok(entry: &DatasetEntry, record: &PipelineRecord, verifier_id: &str) -> Self {
        RunLine {
            entry_id: entry.id.clone(),
            dataset_id: entry.dataset_id.clone(),
            status: "ok".to_string(),
            gold: entry.gold_label,
            method: record.decomposition.method.name(),
            verifier: verifier_id.to_string(),
            n_subclaims: Some(record.decomposition.subclaims.len()),
            subclaims: Some(record.decomposition.texts().iter().map(|s| s.to_string()).collect()),
            scores: Some(record.subclaim_scores.iter().map(|s| s.combined).collect()),
            final_score: Some(record.final_score),
            predicted: Some(record.predicted),
            complexity: entry_complexity(entry),
            error: None,
        }
    }

    pub fn failed(entry: &DatasetEntry, method: &Method, verifier_id: &str, error: String) -> Self {
        RunLine {
            entry_id: entry.id.clone(),
            dataset_id: entry.dataset_id.clone(),
            status: "failed".to_string(),
            gold: entry.gold_label,
            method: method.name(),
            verifier: verifier_id.to_string(),
            n_subclaims: None,
            subclaims: None,
            scores: None,
            final_score: None,
            predicted: None,
            complexity: entry_complexity(entry),
            error: Some(error),
        }
    }
}

pub struct Pipeline {
    pub decomposer: Decomposer,
    pub analyzer: Option<Analyzer>,
    pub retriever: Arc<dyn Retriever>,
    pub verifier: Arc<dyn Verifier>,
    pub aggregator: AggregatorConfig<f64>,
    pub method: Method,
    pub concurrency: usize,
}

impl Pipeline {
    async fn base_decomposition(
        &self,
        entry: &DatasetEntry,
        method: &Method,
    ) -> Result<Decomposition, PipelineError> {
        match method {
            Method::Baseline => Ok(Decomposer::decompose_baseline(&entry.input_text)),
            Method::FactScore | Method::VeriScore | Method::Wice => Ok(self
                .decomposer
                .decompose(&entry.input_text, method, dataset_granularity(&entry.dataset_id))
                .await?),
            Method::ExactN(n) => Ok(self.decomposer.decompose_exact_n(&entry.input_text, *n).await?),
            Method::Reflected(_) => Err(DecomposeError::UnsupportedMethod(method.name()).into()),
        }
    }

    async fn decompose_entry(&self, entry: &DatasetEntry) -> Result<Decomposition, PipelineError> {
        match &self.method {
            Method::Reflected(base) => {
                let initial = self.base_decomposition(entry, base).await?;
                let analyzer = self.analyzer.as_ref().ok_or(PipelineError::MissingAnalyzer)?;
                let result = analyzer.reflect(&entry.input_text, &initial).await?;
                Ok(result.refined)
            }
            method => self.base_decomposition(entry, method).await,
        }
    }

    /// Run the full stage chain for one entry. Sub-claims retrieve and verify
    /// concurrently; scores are reattached by index, so completion order
    /// never changes the result.
    pub async fn process_entry(&self, entry: &DatasetEntry) -> Result<PipelineRecord, PipelineError> {
        let decomposition = self.decompose_entry(entry).await?.with_source_id(&entry.id);
        let score_futures = decomposition.subclaims.iter().map(|sc| async move {
            let evidence = self.retriever.retrieve(&sc.text).await?;
            Ok::<_, PipelineError>(self.verifier.score(&sc.text, sc.index, &evidence).await?)
        });
        let mut subclaim_scores = futures::future::try_join_all(score_futures).await?;
        subclaim_scores.sort_by_key(|s| s.subclaim_index);
        let combined: Vec<f64> = subclaim_scores.iter().map(|s| s.combined).collect();
        let final_score = aggregate(&combined, &self.aggregator)?;
        Ok(PipelineRecord::new(
            entry.id.clone(),
            decomposition,
            subclaim_scores,
            final_score,
            self.aggregator.threshold,
        )?)
    }

    pub async fn run(&self, entries: &[DatasetEntry]) -> Vec<RunLine> {
        let verifier_id = self.verifier.id();
        let mut lines: Vec<RunLine> = futures::stream::iter(entries.iter().map(|entry| {
            let verifier_id = verifier_id.clone();
            async move {
                match self.process_entry(entry).await {
                    Ok(record) => RunLine::ok(entry, &record, &verifier_id),
                    Err(e) => RunLine::failed(entry, &self.method, &verifier_id, e.to_string()),
                }
            }
        }))
        .buffer_unordered(self.concurrency.max(1))
        .collect()
        .await;
        lines.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
        lines
    }
}

pub fn write_run_lines<W: Write>(lines: &[RunLine], writer: &mut W) -> std::io::Result<()> {
    for line in lines {
        serde_json::to_writer(&mut *writer, line)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_run_lines(path: &Path) -> Result<Vec<RunLine>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut lines = Vec::new();
    for (i, raw) in std::io::BufReader::new(file).lines().enumerate() {
        let raw = raw?;
        if raw.trim().is_empty() {
            continue;
        }
        let line: RunLine = serde_json::from_str(&raw).map_err(|e| EvalError::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        lines.push(line);
    }
    Ok(lines)
}

/// Split run output into (predictions, golds, failed count); failed lines
/// contribute only to the count.
pub fn collect_outcomes(lines: &[RunLine]) -> (Vec<Label>, Vec<Label>, usize) {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut failed = 0usize;
    for line in lines {
        match line.predicted {
            Some(p) if line.status == "ok" => {
                preds.push(p);
                golds.push(line.gold);
            }
            _ => failed += 1,
        }
    }
    (preds, golds, failed)
}

pub fn mean_subclaims(lines: &[RunLine]) -> Option<f64> {
    let counts: Vec<usize> = lines.iter().filter_map(|l| l.n_subclaims).collect();
    if counts.is_empty() {
        return None;
    }
    Some(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}
