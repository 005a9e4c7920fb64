//! Multi-layer, multi-channel stacks of VQA units.
//!
//! Parameters live in a flat, named [`ParamSet`]; [`Layout`] maps every model
//! role onto a slot in it. Layer `l` consumes `C^(l-1) + C^(l-2)` (with
//! `C^(0)` the embedded items and `C^(-1)` absent), so the residual input to
//! layer `l+1` is `C^(l) + C^(l-1)`. Contexts for scoring come from the last
//! layer's own output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::{NpaError, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::vqa::{vqa_forward, ExtractionStrategy, StepMask, VqaTrace, VqaVars};

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSlots {
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_pattern_key: usize,
    pub w_context_query: usize,
    pub codebook: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub channels: Vec<ChannelSlots>,
    /// Channel-merge projection `W_σ`; absent in the MC last layer.
    pub merge: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub item_embeddings: usize,
    pub output_embeddings: usize,
    pub positions: Option<usize>,
    pub layers: Vec<LayerSlots>,
    pub shared_codebook: Option<usize>,
}

/// Tensor names and shapes for `config`, in storage order.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embedding_dim;
    let mut out = vec![("item_embeddings".to_string(), vec![config.num_items, d])];
    if !config.tie_output_embeddings {
        out.push(("output_embeddings".into(), vec![config.num_items, d]));
    }
    if config.use_positions {
        out.push(("positional_embeddings".into(), vec![config.max_sequence_length, d]));
    }
    if config.variant == Variant::Mc {
        out.push((
            "shared_codebook".into(),
            vec![config.num_patterns, config.embedding_dim],
        ));
    }
    for l in 0..config.num_layers {
        let hd = config.channel_dim(l);
        for h in 0..config.channels_per_layer[l] {
            let p = format!("layers.{l}.channels.{h}");
            out.push((format!("{p}.w_q"), vec![d, hd]));
            out.push((format!("{p}.w_k"), vec![d, hd]));
            out.push((format!("{p}.w_v"), vec![d, hd]));
            out.push((format!("{p}.w_pattern_key"), vec![hd, hd]));
            out.push((format!("{p}.w_context_query"), vec![hd, hd]));
            if !config.is_mc_last(l) {
                out.push((format!("{p}.codebook"), vec![config.num_patterns, hd]));
            }
        }
        if !config.is_mc_last(l) {
            out.push((format!("layers.{l}.merge"), vec![d, d]));
        }
    }
    out
}

impl Layout {
    fn resolve(config: &ModelConfig, params: &ParamSet) -> Result<Self> {
        let find = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| NpaError::invalid(format!("missing parameter `{name}`")))
        };
        let item_embeddings = find("item_embeddings")?;
        let output_embeddings = if config.tie_output_embeddings {
            item_embeddings
        } else {
            find("output_embeddings")?
        };
        let positions = if config.use_positions {
            Some(find("positional_embeddings")?)
        } else {
            None
        };
        let shared_codebook = if config.variant == Variant::Mc {
            Some(find("shared_codebook")?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut channels = Vec::new();
            for h in 0..config.channels_per_layer[l] {
                let p = format!("layers.{l}.channels.{h}");
                let codebook = if config.is_mc_last(l) {
                    shared_codebook.expect("mc has a shared codebook")
                } else {
                    find(&format!("{p}.codebook"))?
                };
                channels.push(ChannelSlots {
                    w_q: find(&format!("{p}.w_q"))?,
                    w_k: find(&format!("{p}.w_k"))?,
                    w_v: find(&format!("{p}.w_v"))?,
                    w_pattern_key: find(&format!("{p}.w_pattern_key"))?,
                    w_context_query: find(&format!("{p}.w_context_query"))?,
                    codebook,
                });
            }
            let merge = if config.is_mc_last(l) {
                None
            } else {
                Some(find(&format!("layers.{l}.merge"))?)
            };
            layers.push(LayerSlots { channels, merge });
        }
        Ok(Layout {
            item_embeddings,
            output_embeddings,
            positions,
            layers,
            shared_codebook,
        })
    }
}

/// Whether a forward pass is for training (dropout on) or inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train,
    Eval,
}

/// One layer's graph outputs.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub channels: Vec<VqaTrace>,
    /// Merged output `C^(l)`; for the MC last layer, the first head context.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct ModelTrace {
    pub layers: Vec<LayerTrace>,
    /// Per-head contexts `[steps, embedding_dim]`; one entry for SC.
    pub contexts: Vec<Var>,
}

/// Tensor-level forward result for one basket.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextState {
    /// `contexts[h]` is `[steps, embedding_dim]`.
    pub contexts: Vec<Tensor>,
    /// `pattern_attention[layer][channel]` is `ā`, `[steps, num_patterns]`.
    pub pattern_attention: Vec<Vec<Tensor>>,
    /// `context_attention[layer][channel]` is `b`, `[steps, steps]`.
    pub context_attention: Vec<Vec<Tensor>>,
    /// Sampled codebook rows of the MC last layer, `samples[h][step]`.
    pub samples: Option<Vec<Vec<usize>>>,
}

impl ContextState {
    pub fn steps(&self) -> usize {
        self.contexts[0].rows()
    }

    /// Contexts available at `step`, one per head.
    pub fn contexts_at(&self, step: usize) -> Vec<&[f64]> {
        self.contexts.iter().map(|c| c.row(step)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpaModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl NpaModel {
    /// Fresh model: projections `N(0, 1/√fan_in)`, codebooks
    /// `N(0, 1/√pattern_dim)`, positions `N(0, 0.02²)`, embeddings
    /// `N(0, 1/√embedding_dim)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in parameter_shapes(&config) {
            let std = init_std(&name, &shape);
            params.push(name, Tensor::randn(&shape, std, &mut rng));
        }
        Self::from_parts(config, params)
    }

    /// Assemble from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        if expected.len() != params.len() {
            return Err(NpaError::invalid(format!(
                "config expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(params.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(NpaError::invalid(format!(
                    "tensor `{have}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(NpaError::invalid(format!("tensor `{have}` is not finite")));
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(NpaModel {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn into_parts(self) -> (ModelConfig, ParamSet) {
        (self.config, self.params)
    }

    pub fn output_embeddings(&self) -> &Tensor {
        self.params.get(self.layout.output_embeddings)
    }

    pub fn item_embeddings(&self) -> &Tensor {
        self.params.get(self.layout.item_embeddings)
    }

    /// Put every parameter on `g`, trainable or constant.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(NpaError::EmptyPrefix);
        }
        if ids.len() > self.config.max_sequence_length {
            return Err(NpaError::invalid(format!(
                "sequence of {} items exceeds max_sequence_length {}",
                ids.len(),
                self.config.max_sequence_length
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.num_items) {
            return Err(NpaError::invalid(format!(
                "item id {bad} out of range for {} items",
                self.config.num_items
            )));
        }
        Ok(())
    }

    /// Item rows, plus positional rows when enabled.
    pub fn embed_graph(&self, g: &mut Graph, vars: &[Var], ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let x = g.gather_rows(vars[self.layout.item_embeddings], ids)?;
        match (self.config.use_positions, self.layout.positions) {
            (true, Some(pos)) => {
                let steps: Vec<usize> = (0..ids.len()).collect();
                let p = g.gather_rows(vars[pos], &steps)?;
                g.add(x, p)
            }
            _ => Ok(x),
        }
    }

    pub fn embed_inputs(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let x = self.embed_graph(&mut g, &vars, ids)?;
        Ok(g.value(x).clone())
    }

    fn channel_vars(&self, vars: &[Var], c: &ChannelSlots) -> VqaVars {
        VqaVars {
            w_q: vars[c.w_q],
            w_k: vars[c.w_k],
            w_v: vars[c.w_v],
            w_pattern_key: vars[c.w_pattern_key],
            w_context_query: vars[c.w_context_query],
            codebook: vars[c.codebook],
        }
    }

    fn layer_strategy(&self, layer: usize) -> Result<ExtractionStrategy> {
        if layer + 1 < self.config.num_layers {
            return Ok(ExtractionStrategy::weighted_average());
        }
        match self.config.variant {
            Variant::Sc => Ok(ExtractionStrategy {
                kind: self.config.sc_last_strategy,
                gumbel_temperature: self.config.gumbel_temperature,
            }),
            Variant::Mc => ExtractionStrategy::sampling(self.config.gumbel_temperature),
        }
    }

    /// One layer over `input` (`[steps, embedding_dim]`).
    pub fn forward_layer<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        layer: usize,
        input: Var,
        mask: &StepMask,
        mode: Mode,
        rng: &mut R,
    ) -> Result<LayerTrace> {
        let slots = &self.layout.layers[layer];
        let strategy = self.layer_strategy(layer)?;
        let dropout = match mode {
            Mode::Train => self.config.dropout_rate,
            Mode::Eval => 0.0,
        };
        let mut channels = Vec::with_capacity(slots.channels.len());
        for c in &slots.channels {
            let cv = self.channel_vars(vars, c);
            channels.push(vqa_forward(g, input, &cv, mask, strategy, dropout, rng)?);
        }
        let output = match slots.merge {
            Some(merge) => {
                let parts: Vec<Var> = channels.iter().map(|c| c.context).collect();
                let cat = if parts.len() == 1 {
                    parts[0]
                } else {
                    g.concat_cols(&parts)?
                };
                let merged = g.matmul(cat, vars[merge])?;
                if layer + 1 < self.config.num_layers {
                    g.dropout(merged, dropout, rng)?
                } else {
                    merged
                }
            }
            None => channels[0].context,
        };
        Ok(LayerTrace { channels, output })
    }

    /// Full stack over the causal prefixes of `ids`.
    pub fn trace<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        ids: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelTrace> {
        let x = self.embed_graph(g, vars, ids)?;
        let mask = StepMask::causal(ids.len());
        let mut layers = Vec::with_capacity(self.config.num_layers);
        let mut input = x;
        let mut lower = x;
        for l in 0..self.config.num_layers {
            let lt = self.forward_layer(g, vars, l, input, &mask, mode, rng)?;
            if l + 1 < self.config.num_layers {
                input = g.add(lt.output, lower)?;
                lower = lt.output;
            }
            layers.push(lt);
        }
        let last = layers.last().expect("at least one layer");
        let contexts = if self.config.variant == Variant::Mc {
            last.channels.iter().map(|c| c.context).collect()
        } else {
            vec![last.output]
        };
        Ok(ModelTrace { layers, contexts })
    }

    /// Inference forward; deterministic given `seed` (MC sampling included).
    pub fn forward(&self, basket: &[usize], seed: u64) -> Result<ContextState> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tr = self.trace(&mut g, &vars, basket, Mode::Eval, &mut rng)?;
        Ok(self.collect_state(&g, &tr))
    }

    pub fn collect_state(&self, g: &Graph, tr: &ModelTrace) -> ContextState {
        let pattern_attention = tr
            .layers
            .iter()
            .map(|l| {
                l.channels
                    .iter()
                    .map(|c| g.value(c.basket_attention).clone())
                    .collect()
            })
            .collect();
        let context_attention = tr
            .layers
            .iter()
            .map(|l| {
                l.channels
                    .iter()
                    .map(|c| g.value(c.context_attention).clone())
                    .collect()
            })
            .collect();
        let samples = if self.config.variant == Variant::Mc {
            let last = tr.layers.last().expect("at least one layer");
            Some(
                last.channels
                    .iter()
                    .map(|c| c.chosen.clone().unwrap_or_default())
                    .collect(),
            )
        } else {
            None
        };
        ContextState {
            contexts: tr.contexts.iter().map(|&c| g.value(c).clone()).collect(),
            pattern_attention,
            context_attention,
            samples,
        }
    }
}

fn init_std(name: &str, shape: &[usize]) -> f64 {
    if name == "positional_embeddings" {
        0.02
    } else if name.ends_with("codebook") || name.ends_with("embeddings") {
        1.0 / (shape[1] as f64).sqrt()
    } else {
        1.0 / (shape[0] as f64).sqrt()
    }
}
