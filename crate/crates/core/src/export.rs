//! Line-delimited JSON export of per-step attention for offline plotting.
//!
//! The first line is a header record; each following line is one basket
//! prefix. Distributions are written at 32-bit precision.

use serde::Serialize;

use crate::checkpoint::FORMAT_VERSION;
use crate::error::{NpaError, Result};
use crate::model::NpaModel;
use crate::recommend::{score_contexts, top_k, Scoring};

/// Tied to the checkpoint format version.
pub const EXPORT_SCHEMA_VERSION: u32 = FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportHeader {
    pub record: &'static str,
    pub schema_version: u32,
    pub basket: Vec<usize>,
    pub num_layers: usize,
    pub channels_per_layer: Vec<usize>,
    pub num_patterns: usize,
    pub k: usize,
    pub scoring: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredItem {
    pub item: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub record: &'static str,
    pub step: usize,
    pub prefix: Vec<usize>,
    /// `[layer][channel][pattern]`.
    pub pattern_attention: Vec<Vec<Vec<f32>>>,
    /// `[layer][channel][prefix position]`.
    pub context_attention: Vec<Vec<Vec<f32>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled_patterns: Option<Vec<usize>>,
    pub recommendations: Vec<ScoredItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub header: ExportHeader,
    pub steps: Vec<StepRecord>,
}

impl AttentionExport {
    pub fn to_json_lines(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Attention and top-`k` recommendations at every prefix of `basket`.
pub fn export_attention(
    model: &NpaModel,
    basket: &[usize],
    k: usize,
    scoring: Scoring,
    seed: u64,
) -> Result<AttentionExport> {
    if basket.is_empty() {
        return Err(NpaError::EmptyPrefix);
    }
    let cfg = model.config();
    let state = model.forward(basket, seed)?;
    let mut steps = Vec::with_capacity(basket.len());
    for t in 0..basket.len() {
        let prefix = &basket[..=t];
        let pattern_attention = state
            .pattern_attention
            .iter()
            .map(|l| l.iter().map(|a| to_f32(a.row(t))).collect())
            .collect();
        let context_attention = state
            .context_attention
            .iter()
            .map(|l| l.iter().map(|b| to_f32(&b.row(t)[..=t])).collect())
            .collect();
        let scores = score_contexts(&state.contexts_at(t), model.output_embeddings(), scoring)?;
        let mut distinct = prefix.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let rec = top_k(&scores.scores, prefix, k.min(cfg.num_items - distinct.len()));
        steps.push(StepRecord {
            record: "step",
            step: t,
            prefix: prefix.to_vec(),
            pattern_attention,
            context_attention,
            sampled_patterns: state
                .samples
                .as_ref()
                .map(|s| s.iter().map(|h| h[t]).collect()),
            recommendations: rec
                .items
                .iter()
                .zip(&rec.scores)
                .map(|(&item, &s)| ScoredItem { item, score: s as f32 })
                .collect(),
        });
    }
    Ok(AttentionExport {
        header: ExportHeader {
            record: "header",
            schema_version: EXPORT_SCHEMA_VERSION,
            basket: basket.to_vec(),
            num_layers: cfg.num_layers,
            channels_per_layer: cfg.channels_per_layer.clone(),
            num_patterns: cfg.num_patterns,
            k,
            scoring: format!("{:?}", scoring.kind).to_lowercase(),
        },
        steps,
    })
}
