//! Corpus, tokenization, masking, optimization and the pre-training loop.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod data;
pub mod eval;
pub mod optim;
pub mod pretrain;
pub mod vocab;

pub use checkpoint::{Checkpoint, Manifest, Progress};
pub use config::{Mode, RunConfig, TrainConfig};
pub use corpus::{CorpusConfig, Shift};
pub use data::{MaskingConfig, MlmBatch};
pub use eval::masked_log_likelihood;
pub use optim::{adam_step, lr_at, AdamConfig, AdamState};
pub use pretrain::{pretrain, read_metrics, MetricsRecord, RunSummary, Trainer};
pub use vocab::Vocab;
