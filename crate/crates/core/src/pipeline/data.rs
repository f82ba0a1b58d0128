//! Sequence packing, train/validation split and masked-LM batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, MASK, PAD, RESERVED, SEP};
use crate::error::{Result, TcdError};
use crate::seed;
use crate::transformer::{BatchLayout, TokenBatch};

/// Splits corpus lines: the last `val_fraction` of non-empty lines is held out.
pub fn split_lines(text: &str, val_fraction: f64) -> Result<(Vec<&str>, Vec<&str>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(TcdError::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(TcdError::Empty("corpus has no lines".into()));
    }
    let held = ((lines.len() as f64) * val_fraction).round() as usize;
    let held = if val_fraction > 0.0 { held.clamp(1, lines.len().saturating_sub(1).max(1)) } else { 0 };
    let cut = lines.len() - held;
    Ok((lines[..cut].to_vec(), lines[cut..].to_vec()))
}

/// Concatenates the lines' tokens and cuts them into `[CLS] … [SEP]`
/// sequences of `seq_len` (the final sequence may be shorter).
pub fn pack(lines: &[&str], vocab: &Vocab, seq_len: usize) -> Result<Vec<Vec<usize>>> {
    if seq_len < 3 {
        return Err(TcdError::Config("seq_len must be at least 3".into()));
    }
    let stream: Vec<usize> = lines.iter().flat_map(|l| vocab.encode(l)).collect();
    if stream.is_empty() {
        return Err(TcdError::Empty("nothing to pack".into()));
    }
    Ok(stream
        .chunks(seq_len - 2)
        .map(|c| {
            let mut s = Vec::with_capacity(c.len() + 2);
            s.push(CLS);
            s.extend_from_slice(c);
            s.push(SEP);
            s
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub rate: f64,
    /// Share of selected tokens replaced by `[MASK]`.
    pub mask_share: f64,
    /// Share of selected tokens replaced by a random token.
    pub random_share: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_share: 0.8,
            random_share: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.rate)
            && self.mask_share >= 0.0
            && self.random_share >= 0.0
            && self.mask_share + self.random_share <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(TcdError::Config(format!("invalid masking config {self:?}")))
        }
    }
}

/// Corruption applied to one selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// One sequence after masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<usize>,
    pub selected: Vec<bool>,
    pub corruption: Vec<Option<Corruption>>,
}

pub fn selectable(id: usize) -> bool {
    !Vocab::is_special(id)
}

/// Masks one sequence. A sequence with selectable tokens but no selection
/// gets one position chosen uniformly among them.
pub fn mask_sequence<R: Rng + ?Sized>(seq: &[usize], vocab_size: usize, cfg: &MaskingConfig, rng: &mut R) -> MaskedSequence {
    let mut selected: Vec<bool> = seq.iter().map(|&id| selectable(id) && rng.random_bool(cfg.rate)).collect();
    if !selected.iter().any(|&s| s) {
        let candidates: Vec<usize> = (0..seq.len()).filter(|&i| selectable(seq[i])).collect();
        if !candidates.is_empty() {
            selected[candidates[rng.random_range(0..candidates.len())]] = true;
        }
    }
    let mut input = seq.to_vec();
    let mut corruption = vec![None; seq.len()];
    for i in 0..seq.len() {
        if !selected[i] {
            continue;
        }
        let u: f64 = rng.random();
        let c = if u < cfg.mask_share {
            Corruption::Mask
        } else if u < cfg.mask_share + cfg.random_share {
            Corruption::Random
        } else {
            Corruption::Keep
        };
        match c {
            Corruption::Mask => input[i] = MASK,
            Corruption::Random if vocab_size > RESERVED.len() => input[i] = rng.random_range(RESERVED.len()..vocab_size),
            _ => {}
        }
        corruption[i] = Some(c);
    }
    MaskedSequence {
        input,
        selected,
        corruption,
    }
}

/// A padded masked-LM batch. `targets` holds the original token at selected
/// positions and `[PAD]` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub input: TokenBatch,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl MlmBatch {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Masks the sequences at `indices`. Each sequence draws from its own stream
/// keyed by `(seed, epoch, index)`, so a batch does not depend on its
/// neighbours or on batch composition.
pub fn make_mlm_batch(
    sequences: &[Vec<usize>],
    indices: &[usize],
    vocab_size: usize,
    cfg: &MaskingConfig,
    seed: u64,
    epoch: u64,
) -> Result<MlmBatch> {
    if indices.is_empty() {
        return Err(TcdError::Empty("empty batch".into()));
    }
    let seq_len = indices.iter().map(|&i| sequences[i].len()).max().unwrap_or(0);
    let lengths: Vec<usize> = indices.iter().map(|&i| sequences[i].len()).collect();
    let layout = BatchLayout::new(indices.len(), seq_len, lengths)?;
    let n = indices.len() * seq_len;
    let (mut ids, mut targets, mut mask) = (vec![PAD; n], vec![PAD; n], vec![false; n]);
    for (b, &i) in indices.iter().enumerate() {
        let seq = &sequences[i];
        let mut rng = seed::rng(seed, &[seed::MASKING, epoch, i as u64]);
        let m = mask_sequence(seq, vocab_size, cfg, &mut rng);
        for t in 0..seq.len() {
            let r = b * seq_len + t;
            ids[r] = m.input[t];
            if m.selected[t] {
                targets[r] = seq[t];
                mask[r] = true;
            }
        }
    }
    Ok(MlmBatch {
        input: TokenBatch::new(ids, layout)?,
        targets,
        mask,
    })
}
