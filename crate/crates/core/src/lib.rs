//! Vision Transformer training and evaluation engine.
//!
//! Everything is computed in `f64` on the CPU with a small reverse-mode
//! autodiff tape, so every gradient can be checked against finite differences
//! and every run is bit-reproducible from its seed.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use data::{DatasetManifest, PipelineMode};
pub use error::{Error, Result};
pub use harness::{run_compare, run_training, EpochReport, TrainConfig};
pub use metrics::{ConfusionMatrix, MetricsSummary, PredictionSet};
pub use model::{ParamScope, ViTConfig, ViTModel};
pub use optim::{cross_entropy, AdamW, AdamWConfig, CosineSchedule};
pub use rng::Rng;
pub use tensor::{Graph, Param, Tensor, Var};
