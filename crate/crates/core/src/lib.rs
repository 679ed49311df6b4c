//! Iterative vision and language modelling for scene-text recognition,
//! built on a small reverse-mode autodiff engine over `f64` tensors.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod lm;
pub mod model;
pub mod nn;
pub mod param;
pub mod tensor;
pub mod training;

pub use config::{DatasetConfig, ModelConfig, RenderConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::IterNet;
pub use param::{ParamId, ParamStore};
pub use tensor::{RngState, Tensor};
