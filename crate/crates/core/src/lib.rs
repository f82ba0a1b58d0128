pub mod autodiff;
pub mod distill;
pub mod error;
pub mod finetune;
pub mod moe;
pub mod pipeline;
pub mod seed;
pub mod transformer;

pub use autodiff::{Graph, NodeId, Tensor};
pub use error::{Result, TcdError};
