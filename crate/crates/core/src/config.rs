//! Model and training configuration, plus the flat key-value config file.
//!
//! A config file is flat TOML holding any subset of the [`ModelConfig`] and
//! [`TrainConfig`] keys; missing keys take their defaults and unknown keys
//! are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NpaError, Result};
use crate::vqa::StrategyKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Squashed context: channel outputs are merged into one context per step.
    Sc,
    /// Multi-context: the last layer emits one sampled context per head.
    Mc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Catalog size; 0 means "take it from the training data".
    pub num_items: usize,
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub channels_per_layer: Vec<usize>,
    pub num_patterns: usize,
    pub variant: Variant,
    pub mc_last_layer_heads: usize,
    /// Pattern extraction used by the last SC layer (greedy or weighted_average).
    pub sc_last_strategy: StrategyKind,
    pub gumbel_temperature: f64,
    pub dropout_rate: f64,
    pub max_sequence_length: usize,
    pub tie_output_embeddings: bool,
    pub use_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_items: 0,
            embedding_dim: 32,
            num_layers: 2,
            channels_per_layer: vec![4, 4],
            num_patterns: 64,
            variant: Variant::Sc,
            mc_last_layer_heads: 5,
            sc_last_strategy: StrategyKind::WeightedAverage,
            gumbel_temperature: 1.0,
            dropout_rate: 0.1,
            max_sequence_length: 64,
            tie_output_embeddings: false,
            use_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NpaError::Config(m));
        if self.num_items == 0 {
            return fail("num_items must be positive".into());
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be positive".into());
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.channels_per_layer.len() != self.num_layers {
            return fail(format!(
                "channels_per_layer has {} entries for {} layers",
                self.channels_per_layer.len(),
                self.num_layers
            ));
        }
        if self.num_patterns == 0 {
            return fail("num_patterns must be positive".into());
        }
        if self.max_sequence_length == 0 {
            return fail("max_sequence_length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return fail("gumbel_temperature must be positive".into());
        }
        if self.sc_last_strategy == StrategyKind::Sampling {
            return fail("sc_last_strategy must be greedy or weighted_average".into());
        }
        for (l, &h) in self.channels_per_layer.iter().enumerate() {
            if h == 0 {
                return fail(format!("layer {l} has zero channels"));
            }
            let mc_last = self.variant == Variant::Mc && l + 1 == self.num_layers;
            if mc_last {
                if h != self.mc_last_layer_heads {
                    return fail(format!(
                        "mc last layer has {h} channels but mc_last_layer_heads = {}",
                        self.mc_last_layer_heads
                    ));
                }
            } else if self.embedding_dim % h != 0 {
                return fail(format!(
                    "embedding_dim {} not divisible by {h} channels in layer {l}",
                    self.embedding_dim
                ));
            }
        }
        Ok(())
    }

    /// Number of contexts emitted per step.
    pub fn contexts_per_step(&self) -> usize {
        match self.variant {
            Variant::Sc => 1,
            Variant::Mc => self.mc_last_layer_heads,
        }
    }

    /// Width of each channel in `layer`.
    pub fn channel_dim(&self, layer: usize) -> usize {
        if self.is_mc_last(layer) {
            self.embedding_dim
        } else {
            self.embedding_dim / self.channels_per_layer[layer]
        }
    }

    pub fn is_mc_last(&self, layer: usize) -> bool {
        self.variant == Variant::Mc && layer + 1 == self.num_layers
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| NpaError::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Temporal,
    AnyOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub permutations_per_basket: usize,
    pub mode: TrainMode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            permutations_per_basket: 1,
            mode: TrainMode::AnyOrder,
            seed: 0,
            gradient_clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(NpaError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        match self.mode {
            TrainMode::AnyOrder if self.permutations_per_basket == 0 => {
                fail("permutations_per_basket must be >= 1 in any_order mode")
            }
            TrainMode::Temporal if self.permutations_per_basket != 1 => {
                fail("temporal mode does not permute baskets")
            }
            _ => match self.gradient_clip_norm {
                Some(c) if !(c > 0.0) => fail("gradient_clip_norm must be positive"),
                _ => Ok(()),
            },
        }
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| NpaError::Config(e.to_string()))?;
        let cfg: RunConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| NpaError::Config(e.to_string()))?;
        let known: BTreeSet<String> = toml::Table::try_from(&cfg)
            .map_err(|e| NpaError::Config(e.to_string()))?
            .keys()
            .cloned()
            .chain(std::iter::once("gradient_clip_norm".to_string()))
            .collect();
        if let Some(bad) = table.keys().find(|k| !known.contains(*k)) {
            return Err(NpaError::Config(format!("unknown key `{bad}`")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
