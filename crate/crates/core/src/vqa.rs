//! Vector Quantized Attention.
//!
//! One unit looks at a (masked) set of item vectors, infers a distribution
//! over the codebook of combination patterns, extracts a pattern embedding
//! and uses it as a query over the items to produce a context vector:
//!
//! ```text
//! Q, K, V = X·W_q, X·W_k, X·W_v
//! a_j     = softmax(K̃ q_j / √d_q)        with K̃ = Z·W_k̃
//! ā       = mean of a_j over unmasked j
//! z       = greedy / weighted average / Gumbel sample from (Z, ā)
//! ϱ       = z·W_ϱ
//! b       = softmax over unmasked j of (k_j·ϱ / √d_k)
//! c       = Vᵀ b
//! ```
//!
//! A [`StepMask`] holds one mask per output step, so a single call evaluates
//! every causal prefix of a sequence at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{NpaError, Result};
use crate::tensor::{argmax, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Greedy,
    WeightedAverage,
    Sampling,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractionStrategy {
    pub kind: StrategyKind,
    pub gumbel_temperature: f64,
}

impl ExtractionStrategy {
    pub fn greedy() -> Self {
        ExtractionStrategy {
            kind: StrategyKind::Greedy,
            gumbel_temperature: 1.0,
        }
    }

    pub fn weighted_average() -> Self {
        ExtractionStrategy {
            kind: StrategyKind::WeightedAverage,
            gumbel_temperature: 1.0,
        }
    }

    pub fn sampling(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(NpaError::invalid(format!(
                "gumbel temperature must be positive, got {temperature}"
            )));
        }
        Ok(ExtractionStrategy {
            kind: StrategyKind::Sampling,
            gumbel_temperature: temperature,
        })
    }
}

/// Table of trainable combination-pattern embeddings, `[num_patterns, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        entries.require_matrix("codebook")?;
        if !entries.is_finite() {
            return Err(NpaError::invalid("codebook entries must be finite"));
        }
        Ok(Codebook { entries })
    }

    pub fn num_patterns(&self) -> usize {
        self.entries.rows()
    }

    pub fn pattern_dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }
}

/// Parameters of one unit. Weights act on row vectors (`q = x·W_q`).
#[derive(Clone, Debug, PartialEq)]
pub struct VqaParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_pattern_key: Tensor,
    pub w_context_query: Tensor,
    pub codebook: Codebook,
}

impl VqaParams {
    pub fn new(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_pattern_key: Tensor,
        w_context_query: Tensor,
        codebook: Codebook,
    ) -> Result<Self> {
        for (name, t) in [
            ("w_q", &w_q),
            ("w_k", &w_k),
            ("w_v", &w_v),
            ("w_pattern_key", &w_pattern_key),
            ("w_context_query", &w_context_query),
        ] {
            if !t.is_matrix() {
                return Err(NpaError::invalid(format!("{name} must be a matrix")));
            }
        }
        let d_in = w_q.rows();
        let pd = codebook.pattern_dim();
        let consistent = w_k.rows() == d_in
            && w_v.rows() == d_in
            && w_pattern_key.rows() == pd
            && w_pattern_key.cols() == w_q.cols()
            && w_context_query.rows() == pd
            && w_context_query.cols() == w_k.cols();
        if !consistent {
            return Err(NpaError::invalid(
                "vqa projections have inconsistent dimensions",
            ));
        }
        Ok(VqaParams {
            w_q,
            w_k,
            w_v,
            w_pattern_key,
            w_context_query,
            codebook,
        })
    }

    /// Random init: projections `N(0, 1/√fan_in)`, codebook `N(0, 1/√dim)`.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        head_dim: usize,
        num_patterns: usize,
        rng: &mut R,
    ) -> Self {
        let proj = |fan_in: usize, out: usize, rng: &mut R| {
            Tensor::randn(&[fan_in, out], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        let w_q = proj(input_dim, head_dim, rng);
        let w_k = proj(input_dim, head_dim, rng);
        let w_v = proj(input_dim, head_dim, rng);
        let w_pattern_key = proj(head_dim, head_dim, rng);
        let w_context_query = proj(head_dim, head_dim, rng);
        let z = Tensor::randn(
            &[num_patterns, head_dim],
            1.0 / (head_dim as f64).sqrt(),
            rng,
        );
        VqaParams {
            w_q,
            w_k,
            w_v,
            w_pattern_key,
            w_context_query,
            codebook: Codebook { entries: z },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.rows()
    }

    /// Register every tensor on `g` as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> VqaVars {
        VqaVars {
            w_q: g.param(self.w_q.clone()),
            w_k: g.param(self.w_k.clone()),
            w_v: g.param(self.w_v.clone()),
            w_pattern_key: g.param(self.w_pattern_key.clone()),
            w_context_query: g.param(self.w_context_query.clone()),
            codebook: g.param(self.codebook.entries.clone()),
        }
    }
}

/// Graph handles for one unit's parameters.
#[derive(Clone, Copy, Debug)]
pub struct VqaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_pattern_key: Var,
    pub w_context_query: Var,
    pub codebook: Var,
}

/// Which items each output step may see; `step × item`, true = visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepMask {
    steps: usize,
    items: usize,
    visible: Vec<bool>,
}

impl StepMask {
    pub fn new(steps: usize, items: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != steps * items || steps == 0 {
            return Err(NpaError::invalid("step mask has wrong size"));
        }
        Ok(StepMask {
            steps,
            items,
            visible,
        })
    }

    /// One step that sees the items flagged true.
    pub fn single(mask: &[bool]) -> Self {
        StepMask {
            steps: 1,
            items: mask.len(),
            visible: mask.to_vec(),
        }
    }

    /// Step `t` sees items `0..=t`.
    pub fn causal(n: usize) -> Self {
        let mut visible = vec![false; n * n];
        for t in 0..n {
            for j in 0..=t {
                visible[t * n + j] = true;
            }
        }
        StepMask {
            steps: n,
            items: n,
            visible,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, step: usize, item: usize) -> bool {
        self.visible[step * self.items + item]
    }

    fn count(&self, step: usize) -> usize {
        self.visible[step * self.items..(step + 1) * self.items]
            .iter()
            .filter(|&&v| v)
            .count()
    }

    fn require_nonempty(&self) -> Result<()> {
        if (0..self.steps).any(|t| self.count(t) == 0) {
            Err(NpaError::EmptyPrefix)
        } else {
            Ok(())
        }
    }
}

/// Item-level and basket-level pattern attention (tensor form).
#[derive(Clone, Debug, PartialEq)]
pub struct PatternBelief {
    /// `[items, patterns]`.
    pub per_item_attention: Tensor,
    /// `[steps, patterns]`.
    pub basket_attention: Tensor,
}

/// `(Q, K, V)` for each item row.
pub fn project_items(g: &mut Graph, items: Var, p: &VqaVars) -> Result<(Var, Var, Var)> {
    let q = g.matmul(items, p.w_q)?;
    let k = g.matmul(items, p.w_k)?;
    let v = g.matmul(items, p.w_v)?;
    Ok((q, k, v))
}

/// `a_j = softmax(K̃ q_j / √d_q)`, one row per item.
pub fn pattern_attention(g: &mut Graph, q: Var, p: &VqaVars) -> Result<Var> {
    let pattern_keys = g.matmul(p.codebook, p.w_pattern_key)?;
    let keys_t = g.transpose(pattern_keys)?;
    let logits = g.matmul(q, keys_t)?;
    let dq = g.shape(q)[1] as f64;
    let logits = g.scale(logits, 1.0 / dq.sqrt())?;
    g.softmax(logits)
}

/// Mean of the visible attention rows for every step.
pub fn aggregate_attention(g: &mut Graph, per_item: Var, mask: &StepMask) -> Result<Var> {
    mask.require_nonempty()?;
    if g.shape(per_item)[0] != mask.items() {
        return Err(NpaError::shape(
            "aggregate_attention",
            g.shape(per_item),
            &[mask.steps(), mask.items()],
        ));
    }
    g.masked_row_mean(per_item, mask.steps(), mask.visible())
}

/// Extracted pattern embeddings `[steps, pattern_dim]` and, for greedy and
/// sampling, the chosen codebook row per step.
pub fn extract_pattern<R: Rng + ?Sized>(
    g: &mut Graph,
    basket_attention: Var,
    codebook: Var,
    strategy: ExtractionStrategy,
    rng: &mut R,
) -> Result<(Var, Option<Vec<usize>>)> {
    match strategy.kind {
        StrategyKind::WeightedAverage => Ok((g.matmul(basket_attention, codebook)?, None)),
        StrategyKind::Greedy => {
            let idx = g.value(basket_attention).row_argmax();
            Ok((g.gather_rows(codebook, &idx)?, Some(idx)))
        }
        StrategyKind::Sampling => {
            let abar = g.value(basket_attention);
            let idx = (0..abar.rows())
                .map(|r| gumbel_max(abar.row(r), strategy.gumbel_temperature, rng))
                .collect::<Vec<_>>();
            Ok((g.gather_rows(codebook, &idx)?, Some(idx)))
        }
    }
}

/// Draw `argmax_i(ln p_i / T + G_i)` with standard Gumbel noise; at `T = 1`
/// this samples the categorical `p`.
pub fn gumbel_max<R: Rng + ?Sized>(probs: &[f64], temperature: f64, rng: &mut R) -> usize {
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    let scores: Vec<f64> = probs
        .iter()
        .map(|&p| {
            let noise: f64 = gumbel.sample(rng);
            if p > 0.0 {
                p.ln() / temperature + noise
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    argmax(&scores)
}

/// Context attention `b` over visible items and context `c = Vᵀ b`.
pub fn estimate_context(
    g: &mut Graph,
    pattern: Var,
    k: Var,
    v: Var,
    w_context_query: Var,
    mask: &StepMask,
) -> Result<(Var, Var)> {
    mask.require_nonempty()?;
    let query = g.matmul(pattern, w_context_query)?;
    let keys_t = g.transpose(k)?;
    let logits = g.matmul(query, keys_t)?;
    let dk = g.shape(query)[1] as f64;
    let logits = g.scale(logits, 1.0 / dk.sqrt())?;
    if g.shape(logits) != [mask.steps(), mask.items()] {
        return Err(NpaError::shape(
            "estimate_context",
            g.shape(logits),
            &[mask.steps(), mask.items()],
        ));
    }
    let b = g.masked_softmax(logits, Some(mask.visible()))?;
    let c = g.matmul(b, v)?;
    Ok((b, c))
}

/// Graph outputs of one unit.
#[derive(Clone, Debug)]
pub struct VqaTrace {
    pub per_item_attention: Var,
    pub basket_attention: Var,
    pub pattern: Var,
    pub chosen: Option<Vec<usize>>,
    pub context_attention: Var,
    pub context: Var,
}

/// Full unit on `items` (`[n, d_in]`). `attention_dropout` only applies to
/// the weighted-average extraction path.
pub fn vqa_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    items: Var,
    p: &VqaVars,
    mask: &StepMask,
    strategy: ExtractionStrategy,
    attention_dropout: f64,
    rng: &mut R,
) -> Result<VqaTrace> {
    let (q, k, v) = project_items(g, items, p)?;
    let per_item = pattern_attention(g, q, p)?;
    let abar = aggregate_attention(g, per_item, mask)?;
    let extract_from = if strategy.kind == StrategyKind::WeightedAverage {
        g.dropout(abar, attention_dropout, rng)?
    } else {
        abar
    };
    let (pattern, chosen) = extract_pattern(g, extract_from, p.codebook, strategy, rng)?;
    let (b, c) = estimate_context(g, pattern, k, v, p.w_context_query, mask)?;
    Ok(VqaTrace {
        per_item_attention: per_item,
        basket_attention: abar,
        pattern,
        chosen,
        context_attention: b,
        context: c,
    })
}

/// Tensor-level result of [`VqaUnit::evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct VqaOutput {
    pub belief: PatternBelief,
    pub pattern: Tensor,
    pub chosen: Option<Vec<usize>>,
    pub context_attention: Tensor,
    pub context: Tensor,
}

/// A standalone unit for inference on plain tensors.
#[derive(Clone, Debug)]
pub struct VqaUnit {
    pub params: VqaParams,
}

impl VqaUnit {
    pub fn new(params: VqaParams) -> Self {
        VqaUnit { params }
    }

    pub fn evaluate(
        &self,
        items: &Tensor,
        mask: &StepMask,
        strategy: ExtractionStrategy,
        seed: u64,
    ) -> Result<VqaOutput> {
        items.require_matrix("vqa")?;
        if items.cols() != self.params.input_dim() {
            return Err(NpaError::shape(
                "project_items",
                items.shape(),
                self.params.w_q.shape(),
            ));
        }
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = g.constant(items.clone());
        let vars = VqaVars {
            w_q: g.constant(self.params.w_q.clone()),
            w_k: g.constant(self.params.w_k.clone()),
            w_v: g.constant(self.params.w_v.clone()),
            w_pattern_key: g.constant(self.params.w_pattern_key.clone()),
            w_context_query: g.constant(self.params.w_context_query.clone()),
            codebook: g.constant(self.params.codebook.entries.clone()),
        };
        let tr = vqa_forward(&mut g, x, &vars, mask, strategy, 0.0, &mut rng)?;
        Ok(VqaOutput {
            belief: PatternBelief {
                per_item_attention: g.value(tr.per_item_attention).clone(),
                basket_attention: g.value(tr.basket_attention).clone(),
            },
            pattern: g.value(tr.pattern).clone(),
            chosen: tr.chosen,
            context_attention: g.value(tr.context_attention).clone(),
            context: g.value(tr.context).clone(),
        })
    }
}
