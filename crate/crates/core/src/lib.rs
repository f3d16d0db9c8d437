//! Multi-task video scene understanding with hierarchical relation
//! aggregation, inter-task contrastive learning and spatial/temporal
//! adapters, on a small `f64` reverse-mode differentiation engine.

pub mod adapters;
pub mod attention;
pub mod error;
pub mod harness;
pub mod hram;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use adapters::{AdapterConfig, FreezePreset};
pub use error::{HctError, Result};
pub use harness::{Checkpoint, RunConfig};
pub use hram::{HramConfig, TaskId};
pub use metrics::MetricsReport;
pub use model::{HctModel, ModelConfig, Stage};
pub use objectives::{IclConfig, IclReduction, LossWeights, TaxonomySizes};
pub use params::{FreezePlan, ParamCount, ParamId, ParamStore};
pub use synthdata::{ClipSample, Dataset, GenerateOptions};
pub use tensor::{Graph, PoolKind, Tensor, Var};
