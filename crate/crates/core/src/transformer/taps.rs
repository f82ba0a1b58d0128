use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Result, TcdError};

/// Shape of a token batch: `batch` sequences of `seq_len` slots, of which the
/// first `lengths[b]` are real tokens and the rest padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl BatchLayout {
    pub fn new(batch: usize, seq_len: usize, lengths: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq_len == 0 {
            return Err(TcdError::Empty("batch layout with no tokens".into()));
        }
        if lengths.len() != batch || lengths.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(TcdError::Contract(format!(
                "sequence lengths {lengths:?} invalid for {batch}x{seq_len}"
            )));
        }
        Ok(Self { batch, seq_len, lengths })
    }

    pub fn full(batch: usize, seq_len: usize) -> Result<Self> {
        Self::new(batch, seq_len, vec![seq_len; batch])
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Flat row indices of the non-padding tokens, in batch order.
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| (0..self.lengths[b]).map(move |t| b * self.seq_len + t))
            .collect()
    }
}

/// Captures of one sublayer: `trunk` after the post-residual layer norm,
/// `inner` the sublayer output before the residual addition.
#[derive(Debug, Clone, PartialEq)]
pub struct SublayerTap<H> {
    pub trunk: H,
    pub inner: H,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTaps<H> {
    pub attention: SublayerTap<H>,
    pub ffn: SublayerTap<H>,
    /// Per-head queries, each `[tokens × head_dim]`.
    pub queries: Vec<H>,
    /// Per-head keys, each `[tokens × head_dim]`.
    pub keys: Vec<H>,
}

/// Activations captured during one encoder pass at the three distillation
/// sites. Rows are flat `b·seq_len + t`; padding rows are present but never
/// read by the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet<H> {
    pub layout: BatchLayout,
    pub layers: Vec<LayerTaps<H>>,
}

impl<H> TapSet<H> {
    pub fn trunk(&self) -> impl Iterator<Item = &H> {
        self.layers.iter().flat_map(|l| [&l.attention.trunk, &l.ffn.trunk])
    }

    pub fn inner(&self) -> impl Iterator<Item = &H> {
        self.layers.iter().flat_map(|l| [&l.attention.inner, &l.ffn.inner])
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.queries.len())
    }
}

impl TapSet<NodeId> {
    /// Copies tap values out of the graph.
    pub fn materialize(&self, g: &Graph) -> TapSet<Tensor> {
        let v = |id: &NodeId| g.value(*id).clone();
        let sub = |s: &SublayerTap<NodeId>| SublayerTap {
            trunk: v(&s.trunk),
            inner: v(&s.inner),
        };
        TapSet {
            layout: self.layout.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTaps {
                    attention: sub(&l.attention),
                    ffn: sub(&l.ffn),
                    queries: l.queries.iter().map(v).collect(),
                    keys: l.keys.iter().map(v).collect(),
                })
                .collect(),
        }
    }
}
