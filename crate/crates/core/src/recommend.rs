//! Item scoring from contexts and top-k recommendation.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NpaError, Result};
use crate::model::NpaModel;
use crate::tensor::{log_sum_exp, softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringKind {
    Softmax,
    MeanAggregate,
    Fesf,
    /// Counts or similarities from a non-neural baseline.
    Baseline,
}

impl FromStr for ScoringKind {
    type Err = NpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ScoringKind::Softmax),
            "mean" | "mean_aggregate" => Ok(ScoringKind::MeanAggregate),
            "fesf" => Ok(ScoringKind::Fesf),
            other => Err(NpaError::invalid(format!("unknown scoring kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub kind: ScoringKind,
    pub fesf_temperature: Option<f64>,
}

/// How to turn a step's contexts into scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scoring {
    pub kind: ScoringKind,
    pub fesf_temperature: f64,
}

impl Default for Scoring {
    fn default() -> Self {
        Scoring {
            kind: ScoringKind::Softmax,
            fesf_temperature: 1.0,
        }
    }
}

impl Scoring {
    pub fn fesf(temperature: f64) -> Self {
        Scoring {
            kind: ScoringKind::Fesf,
            fesf_temperature: temperature,
        }
    }
}

fn dot_logits(context: &[f64], embeddings: &Tensor) -> Result<Vec<f64>> {
    if context.len() != embeddings.cols() {
        return Err(NpaError::shape(
            "score",
            &[context.len()],
            embeddings.shape(),
        ));
    }
    Ok((0..embeddings.rows())
        .map(|j| {
            embeddings
                .row(j)
                .iter()
                .zip(context)
                .map(|(e, c)| e * c)
                .sum()
        })
        .collect())
}

/// `p(x_j | c) = softmax_j(e_j · c)`.
pub fn score_softmax(context: &[f64], embeddings: &Tensor) -> Result<ScoreVector> {
    let logits = dot_logits(context, embeddings)?;
    Ok(ScoreVector {
        scores: softmax(&logits),
        kind: ScoringKind::Softmax,
        fesf_temperature: None,
    })
}

/// Free-energy merge: `score_j = log Σ_h exp(e_j · c_h / T)`. Unnormalized.
pub fn score_fesf(contexts: &[&[f64]], embeddings: &Tensor, temperature: f64) -> Result<ScoreVector> {
    if contexts.is_empty() {
        return Err(NpaError::invalid("fesf needs at least one context"));
    }
    if !(temperature > 0.0) {
        return Err(NpaError::invalid(format!(
            "fesf temperature must be positive, got {temperature}"
        )));
    }
    let per_context = contexts
        .iter()
        .map(|c| dot_logits(c, embeddings))
        .collect::<Result<Vec<_>>>()?;
    let scores = (0..embeddings.rows())
        .map(|j| {
            let terms: Vec<f64> = per_context.iter().map(|l| l[j] / temperature).collect();
            log_sum_exp(&terms)
        })
        .collect();
    Ok(ScoreVector {
        scores,
        kind: ScoringKind::Fesf,
        fesf_temperature: Some(temperature),
    })
}

/// Mean of the per-context softmax distributions.
pub fn score_mean(contexts: &[&[f64]], embeddings: &Tensor) -> Result<ScoreVector> {
    if contexts.is_empty() {
        return Err(NpaError::invalid("mean scoring needs at least one context"));
    }
    let mut scores = vec![0.0; embeddings.rows()];
    for c in contexts {
        let p = score_softmax(c, embeddings)?;
        for (s, v) in scores.iter_mut().zip(p.scores) {
            *s += v;
        }
    }
    let n = contexts.len() as f64;
    scores.iter_mut().for_each(|s| *s /= n);
    Ok(ScoreVector {
        scores,
        kind: ScoringKind::MeanAggregate,
        fesf_temperature: None,
    })
}

pub fn score_contexts(contexts: &[&[f64]], embeddings: &Tensor, scoring: Scoring) -> Result<ScoreVector> {
    match scoring.kind {
        ScoringKind::Softmax => {
            if contexts.len() != 1 {
                return Err(NpaError::invalid(format!(
                    "softmax scoring takes one context, got {}; use mean or fesf",
                    contexts.len()
                )));
            }
            score_softmax(contexts[0], embeddings)
        }
        ScoringKind::MeanAggregate => score_mean(contexts, embeddings),
        ScoringKind::Fesf => score_fesf(contexts, embeddings, scoring.fesf_temperature),
        ScoringKind::Baseline => Err(NpaError::invalid("baseline scores are not context-based")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    pub k: usize,
}

/// Best `k` items by score, excluding `exclude`; ties go to the lower id.
pub fn top_k(scores: &[f64], exclude: &[usize], k: usize) -> Recommendation {
    let mut banned = vec![false; scores.len()];
    for &i in exclude {
        if i < banned.len() {
            banned[i] = true;
        }
    }
    let mut ids: Vec<usize> = (0..scores.len()).filter(|&i| !banned[i]).collect();
    let by_score = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    if k < ids.len() {
        ids.select_nth_unstable_by(k, by_score);
        ids.truncate(k);
    }
    ids.sort_by(by_score);
    Recommendation {
        scores: ids.iter().map(|&i| scores[i]).collect(),
        items: ids,
        k,
    }
}

/// Score the whole basket at its final step and return the top `k`
/// non-basket items.
pub fn recommend_topk(
    model: &NpaModel,
    basket: &[usize],
    k: usize,
    scoring: Scoring,
    seed: u64,
) -> Result<Recommendation> {
    if basket.is_empty() {
        return Err(NpaError::invalid("empty basket: cold start is not supported"));
    }
    let mut distinct = basket.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let available = model.config().num_items.saturating_sub(distinct.len());
    if k == 0 || k > available {
        return Err(NpaError::invalid(format!(
            "k = {k} must be in 1..={available}"
        )));
    }
    let scores = final_step_scores(model, basket, scoring, seed)?;
    Ok(top_k(&scores.scores, basket, k))
}

/// Scores from the contexts at the last step of `basket`.
pub fn final_step_scores(
    model: &NpaModel,
    basket: &[usize],
    scoring: Scoring,
    seed: u64,
) -> Result<ScoreVector> {
    let state = model.forward(basket, seed)?;
    let contexts = state.contexts_at(state.steps() - 1);
    score_contexts(&contexts, model.output_embeddings(), scoring)
}
