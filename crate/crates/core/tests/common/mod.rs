#![allow(dead_code)]

use tcd_core::pipeline::corpus::{generate, CorpusConfig, Shift};
use tcd_core::pipeline::RunConfig;

/// 2-layer, H=32 toy geometry with 4 experts and desk-scale sampling.
pub fn toy_config(seed: u64) -> RunConfig {
    let text = format!(
        r#"
[model]
hidden_dim = 32
num_layers = 2
num_heads = 2
ffn_dim = 128
vocab_size = 200
max_seq_len = 32

[moe]
num_experts = 4

[distill]
sample_total = 128
num_groups = 4
group_size = 32

[train]
peak_lr = 0.002
warmup_steps = 10
epochs = 2
batch_size = 8
seq_len = 32
val_fraction = 0.1
seed = {seed}
"#
    );
    RunConfig::from_toml(&text).unwrap()
}

pub fn corpus(seed: u64, tokens: usize) -> String {
    generate(&CorpusConfig {
        seed,
        tokens,
        shift: Shift::None,
    })
}
