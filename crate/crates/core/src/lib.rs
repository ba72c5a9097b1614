//! LoRA adapters on a frozen ViT-style backbone: training, merging into a
//! single multi-task model, and benchmarking the merged model.

pub mod autograd;
pub mod backbone;
pub mod container;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod lora;
pub mod merge;
pub mod multitask;
pub mod trainer;

pub use autograd::{Graph, Tensor, Var};
pub use backbone::{BackboneConfig, BackboneWeights, Projection};
pub use error::{Error, Result};
pub use lora::{LoraAdapter, LoraConfig};
pub use merge::{concat_merge, linear_merge, merge, validate_compatibility, MergeSpec, MergeStrategy};
pub use multitask::{MultiTaskModel, TaskHead, TaskKind, TaskOutput};
