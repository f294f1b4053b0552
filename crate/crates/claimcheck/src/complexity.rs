//! Complexity-scaling experiment harness: contiguous claim combinations,
//! scaled-up inputs and the F1 heatmap over (complexity, sub-claim count).

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::{confusion, metrics};
use crate::model::{ClaimAnnotation, DatasetEntry, Label};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ComplexityError {
    #[error("entry has no claims to combine")]
    NoClaims,
    #[error("requested {requested} samples but only {available} combinations are eligible")]
    NotEnoughCombos { available: usize, requested: usize },
    #[error("entry has no context to scale up with")]
    NoContext,
    #[error("nothing to tabulate")]
    Empty,
}

/// A contiguous span of a source entry's claims, joined into one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    pub source_id: String,
    pub claim_indices: Vec<usize>,
    pub text: String,
    pub complexity: usize,
    pub gold: Label,
}

/// Gold label for a span: Unsupported iff any constituent claim is Unsupported.
pub fn combo_label(claims: &[ClaimAnnotation]) -> Label {
    debug_assert!(!claims.is_empty(), "combo_label needs a nonempty span");
    if claims.iter().any(|c| c.label == Label::Unsupported) {
        Label::Unsupported
    } else {
        Label::Supported
    }
}

/// All contiguous spans of an entry's claims.
///
/// For m claims this yields m(m+1)/2 combinations, enumerated by increasing
/// span length and then start position, i.e. for m = 3:
/// C1, C2, C3, C1C2, C2C3, C1C2C3. Texts are joined with a single space.
pub fn build_combinations(entry: &DatasetEntry) -> Result<Vec<Combination>, ComplexityError> {
    let claims = match &entry.claims {
        Some(c) if !c.is_empty() => c,
        _ => return Err(ComplexityError::NoClaims),
    };
    let m = claims.len();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for len in 1..=m {
        for start in 0..=(m - len) {
            let span = &claims[start..start + len];
            out.push(Combination {
                source_id: entry.id.clone(),
                claim_indices: (start..start + len).collect(),
                text: span
                    .iter()
                    .map(|c| c.text.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
                complexity: len,
                gold: combo_label(span),
            });
        }
    }
    Ok(out)
}

/// Uniform sample without replacement from the combinations whose complexity
/// is at most `max_complexity`. Fully determined by `seed`.
pub fn sample_combinations(
    combos: &[Combination],
    n: usize,
    max_complexity: usize,
    seed: u64,
) -> Result<Vec<Combination>, ComplexityError> {
    let eligible: Vec<&Combination> = combos
        .iter()
        .filter(|c| c.complexity <= max_complexity)
        .collect();
    if eligible.len() < n {
        return Err(ComplexityError::NotEnoughCombos {
            available: eligible.len(),
            requested: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..eligible.len()).collect();
    // Partial Fisher-Yates: the first n slots end up a uniform sample.
    for i in 0..n {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    Ok(indices[..n].iter().map(|&i| eligible[i].clone()).collect())
}

/// Convert a combination into a standard dataset entry. The claim span is
/// recorded in the id and the complexity lands in `meta.complexity`.
pub fn combination_entry(combo: &Combination, dataset_id: &str) -> DatasetEntry {
    let first = combo.claim_indices.first().copied().unwrap_or(0);
    let last = combo.claim_indices.last().copied().unwrap_or(0);
    let mut meta = BTreeMap::new();
    meta.insert("complexity".to_string(), combo.complexity.to_string());
    meta.insert("source_id".to_string(), combo.source_id.clone());
    DatasetEntry {
        id: format!("{}::c{}-{}", combo.source_id, first, last),
        dataset_id: dataset_id.to_string(),
        input_text: combo.text.clone(),
        context: None,
        question: None,
        gold_label: combo.gold,
        claims: None,
        meta,
    }
}

/// Lengthened variant of an entry: the context sentences are prepended to the
/// input (joined by single spaces), the id gains a `::long` suffix and the
/// gold label is unchanged. The consumed context is dropped from the result.
pub fn build_scaled_up(entry: &DatasetEntry) -> Result<DatasetEntry, ComplexityError> {
    let context = match &entry.context {
        Some(c) if !c.is_empty() => c,
        _ => return Err(ComplexityError::NoContext),
    };
    let mut scaled = entry.clone();
    scaled.input_text = format!("{} {}", context.join(" "), entry.input_text);
    scaled.id = format!("{}::long", entry.id);
    scaled.context = None;
    Ok(scaled)
}

/// One prediction tagged for the heatmap. Untagged records are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRecord {
    pub complexity: Option<usize>,
    pub n_subclaims: Option<usize>,
    pub predicted: Label,
    pub gold: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub complexity: usize,
    pub n_subclaims: usize,
    pub f1: f64,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub cells: Vec<HeatmapCell>,
    pub skipped: usize,
}

/// Group records by (complexity, n_subclaims) and compute F1 per cell.
/// Records missing either tag are excluded and counted in `skipped`.
pub fn heatmap(records: &[HeatmapRecord]) -> Result<HeatmapGrid, ComplexityError> {
    let mut groups: BTreeMap<(usize, usize), (Vec<Label>, Vec<Label>)> = BTreeMap::new();
    let mut skipped = 0usize;
    for record in records {
        match (record.complexity, record.n_subclaims) {
            (Some(c), Some(n)) => {
                let slot = groups.entry((c, n)).or_default();
                slot.0.push(record.predicted);
                slot.1.push(record.gold);
            }
            _ => skipped += 1,
        }
    }
    if groups.is_empty() {
        return Err(ComplexityError::Empty);
    }
    let cells = groups
        .into_iter()
        .map(|((complexity, n_subclaims), (preds, golds))| {
            let cm = confusion(&preds, &golds).expect("cell is nonempty by construction");
            HeatmapCell {
                complexity,
                n_subclaims,
                f1: metrics::<f64>(&cm).f1,
                n_records: preds.len(),
            }
        })
        .collect();
    Ok(HeatmapGrid { cells, skipped })
}

/// Render a heatmap as CSV with the stable header
/// `complexity,n_subclaims,f1,n_records`.
pub fn render_heatmap_csv(grid: &HeatmapGrid) -> String {
    let mut out = String::from("complexity,n_subclaims,f1,n_records\n");
    for cell in &grid.cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            cell.complexity, cell.n_subclaims, cell.f1, cell.n_records
        ));
    }
    out
}
