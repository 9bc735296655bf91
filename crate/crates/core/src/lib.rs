//! Iterative structured pruning of small decoder-only transformers with
//! recovery tuning between pruning rounds.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod error;
pub mod hexfloat;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod profiler;
pub mod prune_loop;
pub mod pruner;
pub mod tensor;
pub mod toydata;
pub mod tuner;

pub use error::{Error, Result};
pub use model::{FfnWeights, HiddenTrace, LayerBlock, ModelConfig, TokenBatch, TransformerModel};
pub use tensor::Tensor;
