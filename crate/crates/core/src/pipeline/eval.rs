//! Masked-LM log-likelihood under a fixed masking seed.

use super::data::{make_mlm_batch, MaskingConfig};
use crate::autodiff::{kernels, Graph};
use crate::error::{Result, TcdError};
use crate::transformer::Model;

/// Mean log-probability of the true token over every masked position of
/// `sequences`, masking with `(eval_seed, epoch 0)`. Higher is better.
pub fn masked_log_likelihood(
    model: &Model,
    sequences: &[Vec<usize>],
    masking: &MaskingConfig,
    eval_seed: u64,
    batch_size: usize,
) -> Result<f64> {
    if sequences.is_empty() {
        return Err(TcdError::Empty("no sequences to evaluate".into()));
    }
    let vocab_size = model.config().vocab_size;
    let (mut total, mut count) = (0.0, 0usize);
    let indices: Vec<usize> = (0..sequences.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_mlm_batch(sequences, chunk, vocab_size, masking, eval_seed, 0)?;
        let rows: Vec<usize> = (0..batch.mask.len()).filter(|&r| batch.mask[r]).collect();
        if rows.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let (bound, out) = model.forward(&mut g, &batch.input, false)?;
        let logits = model.mlm_logits(&mut g, &bound, out.hidden, &rows)?;
        let logits = g.value(logits);
        for (i, &r) in rows.iter().enumerate() {
            total += kernels::log_softmax_at(logits.row(i), batch.targets[r]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(TcdError::Empty("no maskable tokens in evaluation corpus".into()));
    }
    Ok(total / count as f64)
}
