//! Training objectives and the AdamW training loop.
//!
//! Each sequence contributes one term per step `t >= 2`: the log-likelihood
//! of item `s_t` under the context(s) computed from `s_<t`. For a context
//! obtained by Gumbel sampling, the term also includes the log-probability
//! of the sampled codebook row under the basket attention it was drawn from;
//! deterministic contexts contribute no such term. The autoregressive
//! objective uses the single context per step; the multi-context objective
//! keeps the best head per step before summing.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{TrainConfig, TrainMode, Variant};
use crate::error::{NpaError, Result};
use crate::model::{Mode, NpaModel};
use crate::parallel::{self, derive_seed, Execution};
use crate::tensor::{AdamW, AdamWConfig, Graph, OptimState, Tensor, Var};

/// Uniform random ordering of `basket`; `None` for baskets too short to
/// contribute a term.
pub fn sample_permutation<R: Rng + ?Sized>(basket: &[usize], rng: &mut R) -> Option<Vec<usize>> {
    if basket.len() < 2 {
        return None;
    }
    let mut out = basket.to_vec();
    out.shuffle(rng);
    Some(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Autoregressive,
    MaxPool,
}

impl Objective {
    pub fn for_model(model: &NpaModel) -> Self {
        match model.config().variant {
            Variant::Sc => Objective::Autoregressive,
            Variant::Mc => Objective::MaxPool,
        }
    }
}

/// Per-step, per-head log-likelihood terms `[n - 1, heads]` for `seq`.
pub fn step_log_likelihoods<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &NpaModel,
    vars: &[Var],
    seq: &[usize],
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if seq.len() < 2 {
        return Err(NpaError::invalid("a sequence needs two items to be scored"));
    }
    let tr = model.trace(g, vars, seq, mode, rng)?;
    let steps: Vec<usize> = (0..seq.len() - 1).collect();
    let targets = &seq[1..];
    let e_t = g.transpose(vars[model.layout().output_embeddings])?;
    let last = tr.layers.last().expect("at least one layer");
    let mut cols = Vec::with_capacity(tr.contexts.len());
    for (h, &ctx) in tr.contexts.iter().enumerate() {
        let c = g.gather_rows(ctx, &steps)?;
        let logits = g.matmul(c, e_t)?;
        let nll = g.cross_entropy(logits, targets)?;
        let mut ll = g.scale(nll, -1.0)?;
        if model.config().variant == Variant::Mc {
            let ch = &last.channels[h];
            let chosen = ch
                .chosen
                .as_ref()
                .expect("mc last layer samples a pattern");
            let abar = g.gather_rows(ch.basket_attention, &steps)?;
            let picked = g.pick_per_row(abar, &chosen[..steps.len()])?;
            let log_prior = g.log(picked)?;
            ll = g.add(ll, log_prior)?;
        }
        cols.push(ll);
    }
    if cols.len() == 1 {
        Ok(cols[0])
    } else {
        g.concat_cols(&cols)
    }
}

/// Per-step negative log-likelihood `[n - 1, 1]` under `objective`.
pub fn step_losses(g: &mut Graph, scores: Var, objective: Objective) -> Result<Var> {
    let per_step = match objective {
        Objective::Autoregressive => {
            if g.shape(scores)[1] != 1 {
                return Err(NpaError::invalid(
                    "the autoregressive objective takes one context per step; use loss_mc",
                ));
            }
            scores
        }
        Objective::MaxPool => g.row_max(scores)?,
    };
    g.scale(per_step, -1.0)
}

fn mean_loss<B: AsRef<[usize]>>(
    model: &NpaModel,
    batch: &[B],
    seed: u64,
    objective: Objective,
) -> Result<f64> {
    if objective == Objective::MaxPool && model.config().variant != Variant::Mc {
        return Err(NpaError::invalid("loss_mc requires the MC variant"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, b) in batch.iter().enumerate() {
        let seq = b.as_ref();
        if seq.len() < 2 {
            continue;
        }
        let mut g = Graph::new();
        let vars = model.register(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
        let scores = step_log_likelihoods(&mut g, model, &vars, seq, Mode::Eval, &mut rng)?;
        let losses = step_losses(&mut g, scores, objective)?;
        total += g.value(losses).data().iter().sum::<f64>();
        count += seq.len() - 1;
    }
    if count == 0 {
        return Err(NpaError::invalid("batch has no basket with two or more items"));
    }
    Ok(total / count as f64)
}

/// Mean over all steps `t >= 2` of `-log p(s_t | s_<t)`.
pub fn loss_ar<B: AsRef<[usize]>>(model: &NpaModel, batch: &[B], seed: u64) -> Result<f64> {
    mean_loss(model, batch, seed, Objective::Autoregressive)
}

/// Mean over all steps of the negated best-head joint log-likelihood.
pub fn loss_mc<B: AsRef<[usize]>>(model: &NpaModel, batch: &[B], seed: u64) -> Result<f64> {
    mean_loss(model, batch, seed, Objective::MaxPool)
}

/// Per-step NLL of one sequence under the model's own objective.
pub fn sequence_step_nll(model: &NpaModel, seq: &[usize], seed: u64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = step_log_likelihoods(&mut g, model, &vars, seq, Mode::Eval, &mut rng)?;
    let losses = step_losses(&mut g, scores, Objective::for_model(model))?;
    Ok(g.value(losses).data().to_vec())
}

/// Loss and gradient of one sequence (training mode).
pub struct SequenceGrad {
    pub loss_sum: f64,
    pub step_losses: Vec<f64>,
    pub grads: Vec<Tensor>,
}

pub fn sequence_gradient(model: &NpaModel, seq: &[usize], seed: u64) -> Result<SequenceGrad> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = step_log_likelihoods(&mut g, model, &vars, seq, Mode::Train, &mut rng)?;
    let losses = step_losses(&mut g, scores, Objective::for_model(model))?;
    let total = g.sum(losses)?;
    let loss_sum = g.value(total).item();
    g.backward(total)?;
    let grads = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
        })
        .collect();
    Ok(SequenceGrad {
        loss_sum,
        step_losses: g.value(losses).data().to_vec(),
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    /// Items visible when predicting.
    pub prefix_len: usize,
    pub mean_nll: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub epoch: usize,
    pub mean_nll: f64,
    pub per_step: Vec<StepLoss>,
    pub sequences: usize,
    /// Wall time; left out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub optimizer: OptimState,
}

/// Sequences accumulated by one parallel task. Fixed, so the reduction
/// order never depends on the thread pool.
const SEQUENCES_PER_TASK: usize = 8;

struct Partial {
    loss_sum: f64,
    count: usize,
    per_step: Vec<(usize, f64)>,
    grads: Vec<Tensor>,
}

fn batch_partial(model: &NpaModel, jobs: &[(Vec<usize>, u64)]) -> Result<Partial> {
    let mut acc: Option<Partial> = None;
    for (seq, seed) in jobs {
        let sg = sequence_gradient(model, seq, *seed)?;
        let per_step: Vec<(usize, f64)> = sg
            .step_losses
            .iter()
            .enumerate()
            .map(|(t, &l)| (t + 1, l))
            .collect();
        match &mut acc {
            None => {
                acc = Some(Partial {
                    loss_sum: sg.loss_sum,
                    count: seq.len() - 1,
                    per_step,
                    grads: sg.grads,
                })
            }
            Some(a) => {
                a.loss_sum += sg.loss_sum;
                a.count += seq.len() - 1;
                a.per_step.extend(per_step);
                for (x, y) in a.grads.iter_mut().zip(&sg.grads) {
                    x.add_assign(y);
                }
            }
        }
    }
    acc.ok_or_else(|| NpaError::invalid("empty task"))
}

/// Gradient of the mean per-step loss over `jobs` (sequence, seed).
pub fn batch_gradient(
    model: &NpaModel,
    jobs: &[(Vec<usize>, u64)],
    exec: Execution,
) -> Result<(f64, usize, Vec<(usize, f64)>, Vec<Tensor>)> {
    let tasks: Vec<&[(Vec<usize>, u64)]> = jobs.chunks(SEQUENCES_PER_TASK).collect();
    let partials = parallel::map(&tasks, exec, |t| batch_partial(model, t));
    let mut total: Option<Partial> = None;
    for p in partials {
        let p = p?;
        match &mut total {
            None => total = Some(p),
            Some(acc) => {
                acc.loss_sum += p.loss_sum;
                acc.count += p.count;
                acc.per_step.extend(p.per_step);
                for (x, y) in acc.grads.iter_mut().zip(&p.grads) {
                    x.add_assign(y);
                }
            }
        }
    }
    let mut total = total.ok_or_else(|| NpaError::invalid("empty batch"))?;
    let inv = 1.0 / total.count as f64;
    for gr in &mut total.grads {
        gr.scale_assign(inv);
    }
    Ok((total.loss_sum, total.count, total.per_step, total.grads))
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
}

/// Train `model` in place. `on_epoch` sees each epoch's report as soon as
/// the epoch finishes.
pub fn train<B: AsRef<[usize]> + Sync>(
    dataset: &[B],
    model: &mut NpaModel,
    cfg: &TrainConfig,
    exec: Execution,
    on_epoch: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    train_from(dataset, model, cfg, exec, None, on_epoch)
}

/// As [`train`], resuming from a saved optimizer state when given.
pub fn train_from<B: AsRef<[usize]> + Sync>(
    dataset: &[B],
    model: &mut NpaModel,
    cfg: &TrainConfig,
    exec: Execution,
    resume: Option<OptimState>,
    mut on_epoch: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(NpaError::invalid("training dataset is empty"));
    }
    match (cfg.mode, model.config().use_positions) {
        (TrainMode::AnyOrder, true) => {
            return Err(NpaError::Config(
                "any_order training skips position encoding; set use_positions = false".into(),
            ))
        }
        (TrainMode::Temporal, false) => {
            return Err(NpaError::Config(
                "temporal training encodes positions; set use_positions = true".into(),
            ))
        }
        _ => {}
    }
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].as_ref().len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(NpaError::invalid("no basket has two or more items"));
    }
    let adam_cfg = AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = match resume {
        Some(state) => {
            if state.first_moment.len() != model.params().len() {
                return Err(NpaError::invalid("optimizer state does not match model"));
            }
            let mut state = state;
            state.config = adam_cfg;
            AdamW::from_state(state)
        }
        None => AdamW::new(adam_cfg, model.params().tensors()),
    };
    let names = model.params().names().to_vec();
    let max_len = model.config().max_sequence_length;
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut batch_id = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64]));
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        let mut job_id = 0u64;
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        let mut sequences = 0usize;
        let mut by_step: BTreeMap<usize, (f64, usize)> = BTreeMap::new();

        for chunk in order.chunks(cfg.batch_size) {
            let mut jobs = Vec::with_capacity(chunk.len() * cfg.permutations_per_basket);
            for &i in chunk {
                let basket = dataset[i].as_ref();
                for _ in 0..cfg.permutations_per_basket {
                    let mut seq = match cfg.mode {
                        TrainMode::AnyOrder => {
                            sample_permutation(basket, &mut rng).expect("eligible basket")
                        }
                        TrainMode::Temporal => basket.to_vec(),
                    };
                    seq.truncate(max_len);
                    jobs.push((seq, derive_seed(&[cfg.seed, epoch as u64, job_id, 1])));
                    job_id += 1;
                }
            }
            let (loss_sum, count, per_step, mut grads) = batch_gradient(model, &jobs, exec)
                .map_err(|e| NpaError::NonFiniteLoss {
                    batch: batch_id,
                    detail: e.to_string(),
                })?;
            if !loss_sum.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(NpaError::NonFiniteLoss {
                    batch: batch_id,
                    detail: format!("loss sum {loss_sum}"),
                });
            }
            if let Some(c) = cfg.gradient_clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let grads: Vec<Option<Tensor>> = grads.into_iter().map(Some).collect();
            opt.step(model.params_mut().tensors_mut(), &grads, &names)?;

            epoch_loss += loss_sum;
            epoch_count += count;
            sequences += jobs.len();
            for (t, l) in per_step {
                let e = by_step.entry(t).or_insert((0.0, 0));
                e.0 += l;
                e.1 += 1;
            }
            batch_id += 1;
        }

        let report = LossReport {
            epoch: epoch + 1,
            mean_nll: epoch_loss / epoch_count as f64,
            per_step: by_step
                .into_iter()
                .map(|(prefix_len, (s, n))| StepLoss {
                    prefix_len,
                    mean_nll: s / n as f64,
                    count: n,
                })
                .collect(),
            sequences,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(TrainOutcome {
        reports,
        optimizer: opt.state,
    })
}
