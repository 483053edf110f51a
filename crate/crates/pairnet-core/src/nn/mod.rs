//! Desk-scale neural substrate: f64 tensors, a reverse-mode tape, the layer
//! zoo used by the pair-proposal and relation-fusion stages, AdamW, and
//! binary checkpoint I/O.

pub mod attention;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use attention::{multi_head_attention, AttentionParams};
pub use optim::{adamw_step, LinearParams, OptimizerConfig, ParamId, ParamStore};
pub use tape::{Tape, Value};
pub use tensor::Tensor;
