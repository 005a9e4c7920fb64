//! Ranking metrics (P@k, R@k, R-Precision, NDCG@20) and the POP, CP and
//! item-item CF baselines.

use std::fmt;

use serde::Serialize;

use crate::data::{Basket, EvalInstance};
use crate::error::{NpaError, Result};
use crate::model::NpaModel;
use crate::parallel::{self, derive_seed, Execution};
use crate::recommend::{final_step_scores, top_k, Scoring, ScoreVector, ScoringKind};

pub const CUTOFFS: [usize; 5] = [1, 5, 10, 15, 20];
pub const NDCG_CUTOFF: usize = 20;
/// Ranked list length used for evaluation.
pub const EVAL_LIST_LEN: usize = 100;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(rename = "P@1")]
    pub p1: f64,
    #[serde(rename = "P@5")]
    pub p5: f64,
    #[serde(rename = "P@10")]
    pub p10: f64,
    #[serde(rename = "P@15")]
    pub p15: f64,
    #[serde(rename = "P@20")]
    pub p20: f64,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "R@15")]
    pub r15: f64,
    #[serde(rename = "R@20")]
    pub r20: f64,
    #[serde(rename = "R-Precision")]
    pub r_precision: f64,
    #[serde(rename = "NDCG")]
    pub ndcg: f64,
    pub instances: usize,
}

impl MetricReport {
    pub fn precision(&self) -> [f64; 5] {
        [self.p1, self.p5, self.p10, self.p15, self.p20]
    }

    pub fn recall(&self) -> [f64; 5] {
        [self.r1, self.r5, self.r10, self.r15, self.r20]
    }

    pub fn values(&self) -> [f64; 12] {
        let p = self.precision();
        let r = self.recall();
        [
            p[0], p[1], p[2], p[3], p[4], r[0], r[1], r[2], r[3], r[4], self.r_precision, self.ndcg,
        ]
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    fn from_values(v: [f64; 12], instances: usize) -> Self {
        MetricReport {
            p1: v[0],
            p5: v[1],
            p10: v[2],
            p15: v[3],
            p20: v[4],
            r1: v[5],
            r5: v[6],
            r10: v[7],
            r15: v[8],
            r20: v[9],
            r_precision: v[10],
            ndcg: v[11],
            instances,
        }
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 12] = [
            "P@1", "P@5", "P@10", "P@15", "P@20", "R@1", "R@5", "R@10", "R@15", "R@20", "R-Prec",
            "NDCG",
        ];
        for n in NAMES {
            write!(f, "{n:>8}")?;
        }
        writeln!(f)?;
        for v in self.values() {
            write!(f, "{v:>8.4}")?;
        }
        writeln!(f)?;
        write!(f, "instances: {}", self.instances)
    }
}

/// Metrics of one ranked list, in [`MetricReport::values`] order.
pub fn instance_metrics(ranked: &[usize], truth: &[usize]) -> Result<[f64; 12]> {
    let mut truth = truth.to_vec();
    truth.sort_unstable();
    truth.dedup();
    if truth.is_empty() {
        return Err(NpaError::invalid("instance has empty ground truth"));
    }
    if ranked.len() < NDCG_CUTOFF {
        return Err(NpaError::invalid(format!(
            "ranked list of {} items is shorter than cutoff {NDCG_CUTOFF}",
            ranked.len()
        )));
    }
    let hit: Vec<bool> = ranked.iter().map(|i| truth.binary_search(i).is_ok()).collect();
    let hits_at = |k: usize| hit[..k.min(hit.len())].iter().filter(|&&h| h).count() as f64;
    let n_truth = truth.len() as f64;
    let mut v = [0.0; 12];
    for (c, &k) in CUTOFFS.iter().enumerate() {
        v[c] = hits_at(k) / k as f64;
        v[5 + c] = hits_at(k) / n_truth;
    }
    let r = truth.len().min(ranked.len());
    v[10] = hits_at(r) / r as f64;
    let dcg: f64 = hit[..NDCG_CUTOFF]
        .iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(i, _)| 1.0 / (i as f64 + 2.0).log2())
        .sum();
    let ideal: f64 = (0..truth.len().min(NDCG_CUTOFF))
        .map(|i| 1.0 / (i as f64 + 2.0).log2())
        .sum();
    v[11] = dcg / ideal;
    Ok(v)
}

/// Macro-averaged metrics over `(ranked list, truth)` pairs.
pub fn compute_metrics(instances: &[(Vec<usize>, Vec<usize>)]) -> Result<MetricReport> {
    if instances.is_empty() {
        return Err(NpaError::invalid("no evaluation instances"));
    }
    let mut sum = [0.0; 12];
    for (ranked, truth) in instances {
        let v = instance_metrics(ranked, truth)?;
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = instances.len() as f64;
    Ok(MetricReport::from_values(sum.map(|s| s / n), instances.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Pop,
    Cp,
    ItemCf,
}

impl std::str::FromStr for BaselineKind {
    type Err = NpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pop" => Ok(BaselineKind::Pop),
            "cp" => Ok(BaselineKind::Cp),
            "itemcf" | "item_cf" | "item-cf" => Ok(BaselineKind::ItemCf),
            other => Err(NpaError::invalid(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Item frequencies and the item-item co-purchase matrix of a training split.
#[derive(Clone, Debug)]
pub struct BaselineStats {
    num_items: usize,
    counts: Vec<f64>,
    /// Sparse symmetric co-occurrence rows, sorted by column, no diagonal.
    cooc: Vec<Vec<(usize, f64)>>,
    norms: Vec<f64>,
}

impl BaselineStats {
    pub fn fit(train: &[Basket], num_items: usize) -> Self {
        let mut counts = vec![0.0; num_items];
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> =
            vec![Default::default(); num_items];
        for b in train {
            let mut items: Vec<usize> = b.items.iter().copied().filter(|&i| i < num_items).collect();
            items.sort_unstable();
            items.dedup();
            for (x, &i) in items.iter().enumerate() {
                counts[i] += 1.0;
                for &j in &items[x + 1..] {
                    *rows[i].entry(j).or_insert(0.0) += 1.0;
                    *rows[j].entry(i).or_insert(0.0) += 1.0;
                }
            }
        }
        let cooc: Vec<Vec<(usize, f64)>> = rows.into_iter().map(|r| r.into_iter().collect()).collect();
        let norms = cooc
            .iter()
            .map(|r| r.iter().map(|(_, v)| v * v).sum::<f64>().sqrt())
            .collect();
        BaselineStats {
            num_items,
            counts,
            cooc,
            norms,
        }
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn cooccurrence(&self, i: usize, j: usize) -> f64 {
        self.cooc
            .get(i)
            .and_then(|r| r.binary_search_by_key(&j, |&(c, _)| c).ok().map(|p| r[p].1))
            .unwrap_or(0.0)
    }

    /// Scores for every catalog item plus the number of basket items that
    /// were never seen in training (treated as zero vectors).
    pub fn scores(&self, kind: BaselineKind, basket: &[usize]) -> (ScoreVector, usize) {
        let seen = |i: usize| i < self.num_items && self.counts[i] > 0.0;
        let unseen = basket.iter().filter(|&&i| !seen(i)).count();
        let mut scores = vec![0.0; self.num_items];
        match kind {
            BaselineKind::Pop => scores.copy_from_slice(&self.counts),
            BaselineKind::Cp => {
                for &i in basket.iter().filter(|&&i| seen(i)) {
                    for &(j, v) in &self.cooc[i] {
                        scores[j] += v;
                    }
                }
            }
            BaselineKind::ItemCf => {
                let mut dots = vec![0.0; self.num_items];
                for &i in basket.iter().filter(|&&i| seen(i) && self.norms[i] > 0.0) {
                    dots.iter_mut().for_each(|d| *d = 0.0);
                    for &(k, a) in &self.cooc[i] {
                        for &(j, b) in &self.cooc[k] {
                            dots[j] += a * b;
                        }
                    }
                    for j in 0..self.num_items {
                        if self.norms[j] > 0.0 && dots[j] != 0.0 {
                            scores[j] += dots[j] / (self.norms[i] * self.norms[j]);
                        }
                    }
                }
            }
        }
        (
            ScoreVector {
                scores,
                kind: ScoringKind::Baseline,
                fesf_temperature: None,
            },
            unseen,
        )
    }
}

/// Rank up to `list_len` non-input items per instance with `score_fn` and
/// evaluate every instance.
pub fn evaluate_with<F>(
    instances: &[EvalInstance],
    num_items: usize,
    list_len: usize,
    exec: Execution,
    score_fn: F,
) -> Result<MetricReport>
where
    F: Fn(usize, &EvalInstance) -> Result<Vec<f64>> + Sync + Send,
{
    let indexed: Vec<(usize, &EvalInstance)> = instances.iter().enumerate().collect();
    let ranked = parallel::map(&indexed, exec, |(i, inst)| -> Result<(Vec<usize>, Vec<usize>)> {
        let scores = score_fn(*i, inst)?;
        let n = list_len.min(num_items.saturating_sub(inst.input.len()));
        let rec = top_k(&scores, &inst.input, n);
        Ok((rec.items, inst.truth.clone()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    compute_metrics(&ranked)
}

pub fn evaluate_model(
    model: &NpaModel,
    instances: &[EvalInstance],
    scoring: Scoring,
    list_len: usize,
    seed: u64,
    exec: Execution,
) -> Result<MetricReport> {
    evaluate_with(instances, model.config().num_items, list_len, exec, |i, inst| {
        Ok(final_step_scores(model, &inst.input, scoring, derive_seed(&[seed, i as u64]))?.scores)
    })
}

/// Metrics and the total unseen-item tally.
pub fn evaluate_baseline(
    stats: &BaselineStats,
    kind: BaselineKind,
    instances: &[EvalInstance],
    list_len: usize,
    exec: Execution,
) -> Result<(MetricReport, usize)> {
    let unseen: usize = instances
        .iter()
        .map(|inst| inst.input.iter().filter(|&&i| i >= stats.num_items || stats.counts[i] == 0.0).count())
        .sum();
    let report = evaluate_with(instances, stats.num_items, list_len, exec, |_, inst| {
        Ok(stats.scores(kind, &inst.input).0.scores)
    })?;
    Ok((report, unseen))
}
