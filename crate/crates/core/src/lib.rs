//! Neural Pattern Associator: within-basket item recommendation with
//! vector-quantized attention over a learned codebook of combination
//! patterns.
//!
//! The crate bundles a small f64 tensor engine with reverse-mode autodiff,
//! the VQA unit and the layered NPA-SC / NPA-MC models, training with AdamW,
//! scoring and top-k recommendation, a planted-pattern synthetic generator,
//! ranking metrics with POP / CP / item-CF baselines, and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod recommend;
pub mod tensor;
pub mod training;
pub mod vqa;

pub use config::{ModelConfig, RunConfig, TrainConfig, TrainMode, Variant};
pub use error::{NpaError, Result};
pub use model::NpaModel;
pub use tensor::{Graph, Tensor, Var};
