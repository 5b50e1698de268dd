//! Rank-adaptive mixture-of-experts LoRA for a unified spatiotemporal
//! transformer, with the small reverse-mode engine it is built on.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Padding, Var};
pub use params::{Ctx, ForwardOptions, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
