//! Post-LN BERT-style encoder with activation taps.
//!
//! Activations are kept flat as `[batch·seq_len × hidden]`. Each layer is a
//! multi-head attention sublayer followed by a feed-forward sublayer (dense
//! or mixture-of-experts), both wrapped as `LayerNorm(h + sublayer(h))`.

mod params;
mod taps;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Result, TcdError};
use crate::moe::{self, MoEConfig};

pub use params::{Bound, Param, ParamId, ParamKind, ParamStore};
pub use taps::{BatchLayout, LayerTaps, SublayerTap, TapSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ln_eps: f64,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    /// The small published geometry: 12 layers, H=128, 2 heads.
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            num_layers: 12,
            num_heads: 2,
            ffn_dim: 512,
            vocab_size: 30522,
            max_seq_len: 128,
            ln_eps: 1e-12,
            hidden_dropout: 0.0,
            attention_dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Geometry with `ffn_dim = 4H` and otherwise default settings.
    pub fn small(hidden_dim: usize, num_layers: usize, num_heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            hidden_dim,
            num_layers,
            num_heads,
            ffn_dim: 4 * hidden_dim,
            vocab_size,
            max_seq_len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(TcdError::Config(format!("model.{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(TcdError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        for (name, p) in [("hidden_dropout", self.hidden_dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(TcdError::Config(format!("model.{name} must be in [0, 1)")));
            }
        }
        if !(self.ln_eps >= 0.0) || !(self.init_std >= 0.0) {
            return Err(TcdError::Config("ln_eps and init_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Closed-form parameter count of the encoder (no adapters or heads).
    pub fn parameter_count(&self, moe: Option<&MoEConfig>) -> usize {
        let (h, f) = (self.hidden_dim, self.ffn_dim);
        let embeddings = self.vocab_size * h + self.max_seq_len * h;
        let attention = 4 * h * h + 4 * h + 2 * h;
        let ffn = 2 * f * h + f + h;
        let ffn_block = match moe {
            None => ffn,
            Some(m) => m.num_experts * ffn + m.num_experts * h + m.num_experts,
        } + 2 * h;
        embeddings + self.num_layers * (attention + ffn_block)
    }
}

/// Token ids laid out `[batch × seq_len]`, right-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub layout: BatchLayout,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, layout: BatchLayout) -> Result<Self> {
        if ids.len() != layout.tokens() {
            return Err(TcdError::dim("token batch", &[ids.len()], &[layout.batch, layout.seq_len]));
        }
        Ok(Self { ids, layout })
    }

    /// Right-pads `seqs` with `pad_id` to the longest sequence.
    pub fn from_sequences(seqs: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let layout = BatchLayout::new(seqs.len(), seq_len, seqs.iter().map(Vec::len).collect())?;
        let mut ids = Vec::with_capacity(layout.tokens());
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad_id, seq_len - s.len()));
        }
        Self::new(ids, layout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FfnIds {
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub down_w: ParamId,
    pub down_b: ParamId,
}

/// Graph nodes of one feed-forward network (a dense FFN or one expert).
#[derive(Debug, Clone, Copy)]
pub struct FfnNodes {
    pub up_w: NodeId,
    pub up_b: NodeId,
    pub down_w: NodeId,
    pub down_b: NodeId,
}

impl FfnIds {
    fn bind(&self, b: &Bound) -> FfnNodes {
        FfnNodes {
            up_w: b.node(self.up_w),
            up_b: b.node(self.up_b),
            down_w: b.node(self.down_w),
            down_b: b.node(self.down_b),
        }
    }
}

/// `down(GELU(up(x)))`.
pub fn ffn_apply(g: &mut Graph, x: NodeId, f: &FfnNodes) -> Result<NodeId> {
    let u = g.matmul(x, f.up_w)?;
    let u = g.add_row(u, f.up_b)?;
    let a = g.gelu(u);
    let d = g.matmul(a, f.down_w)?;
    g.add_row(d, f.down_b)
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionIds {
    query_w: ParamId,
    query_b: ParamId,
    key_w: ParamId,
    key_b: ParamId,
    value_w: ParamId,
    value_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum FfnBlock {
    Dense(FfnIds),
    Moe {
        router_w: ParamId,
        router_b: ParamId,
        experts: Vec<FfnIds>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    attention: AttentionIds,
    ffn: FfnBlock,
    ln_g: ParamId,
    ln_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct AdapterIds {
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadIds {
    w: ParamId,
    b: ParamId,
}

/// Encoder weights plus the structural map from roles to parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    moe: Option<MoEConfig>,
    params: ParamStore,
    token_emb: ParamId,
    position_emb: ParamId,
    layers: Vec<LayerIds>,
    /// `[attention, ffn]` adapters per layer once attached.
    adapters: Vec<[AdapterIds; 2]>,
    head: Option<HeadIds>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn weight(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

/// Result of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: NodeId,
    pub taps: TapSet<NodeId>,
    /// Router probabilities `[tokens × E]` per MoE layer (empty for vanilla).
    pub router_probs: Vec<NodeId>,
    /// Selected expert per token, per MoE layer.
    pub routes: Vec<Vec<usize>>,
    /// Attention weights per layer, head and sequence, each `[seq_len × length]`.
    pub attention: Vec<Vec<Vec<NodeId>>>,
}

impl Model {
    pub fn new(config: ModelConfig, moe: Option<MoEConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(m) = &moe {
            m.validate()?;
        }
        let normal = Normal::new(0.0, config.init_std).map_err(|e| TcdError::Config(e.to_string()))?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        };
        let (h, f) = (config.hidden_dim, config.ffn_dim);
        let mut ps = ParamStore::default();
        let token_emb = ps.push("embeddings.token", init.weight(&[config.vocab_size, h]), ParamKind::Weight);
        let position_emb = ps.push("embeddings.position", init.weight(&[config.max_seq_len, h]), ParamKind::Weight);

        let ffn = |ps: &mut ParamStore, init: &mut Init, prefix: &str| FfnIds {
            up_w: ps.push(format!("{prefix}.up.weight"), init.weight(&[h, f]), ParamKind::Weight),
            up_b: ps.push(format!("{prefix}.up.bias"), Tensor::zeros(&[f]), ParamKind::Bias),
            down_w: ps.push(format!("{prefix}.down.weight"), init.weight(&[f, h]), ParamKind::Weight),
            down_b: ps.push(format!("{prefix}.down.bias"), Tensor::zeros(&[h]), ParamKind::Bias),
        };

        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layer.{l}");
            let mut lin = |ps: &mut ParamStore, name: &str| {
                (
                    ps.push(format!("{p}.attention.{name}.weight"), init.weight(&[h, h]), ParamKind::Weight),
                    ps.push(format!("{p}.attention.{name}.bias"), Tensor::zeros(&[h]), ParamKind::Bias),
                )
            };
            let (query_w, query_b) = lin(&mut ps, "query");
            let (key_w, key_b) = lin(&mut ps, "key");
            let (value_w, value_b) = lin(&mut ps, "value");
            let (out_w, out_b) = lin(&mut ps, "output");
            let attention = AttentionIds {
                query_w,
                query_b,
                key_w,
                key_b,
                value_w,
                value_b,
                out_w,
                out_b,
                ln_g: ps.push(format!("{p}.attention.norm.gamma"), Tensor::filled(&[h], 1.0), ParamKind::Norm),
                ln_b: ps.push(format!("{p}.attention.norm.beta"), Tensor::zeros(&[h]), ParamKind::Norm),
            };
            let block = match &moe {
                None => FfnBlock::Dense(ffn(&mut ps, &mut init, &format!("{p}.ffn"))),
                Some(m) => {
                    let router_w = ps.push(
                        format!("{p}.moe.router.weight"),
                        init.weight(&[m.num_experts, h]),
                        ParamKind::Weight,
                    );
                    let router_b = ps.push(format!("{p}.moe.router.bias"), Tensor::zeros(&[m.num_experts]), ParamKind::Bias);
                    let experts = (0..m.num_experts)
                        .map(|e| ffn(&mut ps, &mut init, &format!("{p}.moe.expert.{e}")))
                        .collect();
                    FfnBlock::Moe {
                        router_w,
                        router_b,
                        experts,
                    }
                }
            };
            layers.push(LayerIds {
                attention,
                ffn: block,
                ln_g: ps.push(format!("{p}.ffn.norm.gamma"), Tensor::filled(&[h], 1.0), ParamKind::Norm),
                ln_b: ps.push(format!("{p}.ffn.norm.beta"), Tensor::zeros(&[h]), ParamKind::Norm),
            });
        }
        Ok(Self {
            config,
            moe,
            params: ps,
            token_emb,
            position_emb,
            layers,
            adapters: Vec::new(),
            head: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn moe_config(&self) -> Option<&MoEConfig> {
        self.moe.as_ref()
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_emb
    }

    pub fn position_embedding(&self) -> ParamId {
        self.position_emb
    }

    /// Router weight and bias of layer `l`, if it is an MoE layer.
    pub fn router(&self, l: usize) -> Option<(ParamId, ParamId)> {
        match &self.layers.get(l)?.ffn {
            FfnBlock::Moe { router_w, router_b, .. } => Some((*router_w, *router_b)),
            FfnBlock::Dense(_) => None,
        }
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Overwrites one parameter by name. Shapes must agree.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .params
            .find(name)
            .ok_or_else(|| TcdError::Compatibility(format!("model has no parameter {name}")))?;
        let p = self.params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(TcdError::Compatibility(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, grad: bool) -> Bound {
        Bound::new(g, &self.params, grad)
    }

    /// Binds parameters and runs the encoder without dropout.
    pub fn forward(&self, g: &mut Graph, batch: &TokenBatch, grad: bool) -> Result<(Bound, EncoderOutput)> {
        let bound = self.bind(g, grad);
        let out = self.forward_bound(g, &bound, batch, None)?;
        Ok((bound, out))
    }

    /// Token plus learned position embedding, `[B·T × H]`.
    pub fn embed(&self, g: &mut Graph, bound: &Bound, batch: &TokenBatch) -> Result<NodeId> {
        let layout = &batch.layout;
        if layout.seq_len > self.config.max_seq_len {
            return Err(TcdError::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                layout.seq_len, self.config.max_seq_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(TcdError::Vocabulary {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        let tok = g.gather_rows(bound.node(self.token_emb), &batch.ids)?;
        let positions: Vec<usize> = (0..layout.tokens()).map(|r| r % layout.seq_len).collect();
        let pos = g.gather_rows(bound.node(self.position_emb), &positions)?;
        g.add(tok, pos)
    }

    /// Runs every layer on already-bound parameters. `dropout` supplies the
    /// randomness for training-mode dropout; `None` disables dropout.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &TokenBatch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let mut h = self.embed(g, bound, batch)?;
        let mut taps = TapSet {
            layout: batch.layout.clone(),
            layers: Vec::with_capacity(self.layers.len()),
        };
        let mut router_probs = Vec::new();
        let mut routes = Vec::new();
        let mut attention = Vec::new();
        for l in 0..self.layers.len() {
            let (a_out, a_tap, q, k, attn) = self.mha_sublayer(g, bound, l, h, &batch.layout, dropout.as_deref_mut())?;
            let (f_out, f_tap, routing) = self.ffn_sublayer(g, bound, l, a_out, dropout.as_deref_mut())?;
            if let Some((p, r)) = routing {
                router_probs.push(p);
                routes.push(r);
            }
            taps.layers.push(LayerTaps {
                attention: a_tap,
                ffn: f_tap,
                queries: q,
                keys: k,
            });
            attention.push(attn);
            h = f_out;
        }
        Ok(EncoderOutput {
            hidden: h,
            taps,
            router_probs,
            routes,
            attention,
        })
    }

    fn linear(&self, g: &mut Graph, bound: &Bound, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let y = g.matmul(x, bound.node(w))?;
        g.add_row(y, bound.node(b))
    }

    fn adapter(&self, g: &mut Graph, bound: &Bound, l: usize, site: usize, z: NodeId) -> Result<NodeId> {
        let Some(a) = self.adapters.get(l).map(|pair| &pair[site]) else {
            return Ok(z);
        };
        let d = self.linear(g, bound, z, a.down_w, a.down_b)?;
        let d = g.gelu(d);
        let u = self.linear(g, bound, d, a.up_w, a.up_b)?;
        g.add(z, u)
    }

    /// `LN(h + MHA(h))` for layer `l`. Returns the output, its taps, the
    /// per-head query/key nodes and the attention weights per head and sequence.
    #[allow(clippy::type_complexity)]
    pub fn mha_sublayer(
        &self,
        g: &mut Graph,
        bound: &Bound,
        l: usize,
        h: NodeId,
        layout: &BatchLayout,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, SublayerTap<NodeId>, Vec<NodeId>, Vec<NodeId>, Vec<Vec<NodeId>>)> {
        let ids = &self.layers[l].attention;
        let q = self.linear(g, bound, h, ids.query_w, ids.query_b)?;
        let k = self.linear(g, bound, h, ids.key_w, ids.key_b)?;
        let v = self.linear(g, bound, h, ids.value_w, ids.value_b)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let t = layout.seq_len;

        let mut queries = Vec::with_capacity(self.config.num_heads);
        let mut keys = Vec::with_capacity(self.config.num_heads);
        let mut weights = Vec::with_capacity(self.config.num_heads);
        let mut contexts = Vec::with_capacity(self.config.num_heads);
        for head in 0..self.config.num_heads {
            let (c0, c1) = (head * dh, (head + 1) * dh);
            let (qh, kh, vh) = if self.config.num_heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, c0, c1)?, g.slice_cols(k, c0, c1)?, g.slice_cols(v, c0, c1)?)
            };
            queries.push(qh);
            keys.push(kh);
            let mut per_seq = Vec::with_capacity(layout.batch);
            let mut ctx = Vec::with_capacity(layout.batch);
            for b in 0..layout.batch {
                let len = layout.lengths[b];
                let qb = g.slice_rows(qh, b * t, (b + 1) * t)?;
                let kb = g.slice_rows(kh, b * t, b * t + len)?;
                let vb = g.slice_rows(vh, b * t, b * t + len)?;
                let s = g.matmul_nt(qb, kb)?;
                let s = g.scale(s, scale);
                let a = g.softmax(s, 1)?;
                per_seq.push(a);
                let a = match dropout.as_deref_mut() {
                    Some(rng) => g.dropout(a, self.config.attention_dropout, rng)?,
                    None => a,
                };
                ctx.push(g.matmul(a, vb)?);
            }
            contexts.push(g.concat_rows(&ctx)?);
            weights.push(per_seq);
        }
        let ctx = g.concat_cols(&contexts)?;
        let inner = self.linear(g, bound, ctx, ids.out_w, ids.out_b)?;
        let inner = match dropout {
            Some(rng) => g.dropout(inner, self.config.hidden_dropout, rng)?,
            None => inner,
        };
        let adapted = self.adapter(g, bound, l, 0, inner)?;
        let sum = g.add(h, adapted)?;
        let trunk = g.layer_norm(sum, bound.node(ids.ln_g), bound.node(ids.ln_b), self.config.ln_eps)?;
        Ok((trunk, SublayerTap { trunk, inner }, queries, keys, weights))
    }

    /// `LN(h + FFN(h))` for layer `l`, where FFN is dense or mixture-of-experts.
    /// For MoE layers also returns router probabilities and selected experts.
    #[allow(clippy::type_complexity)]
    pub fn ffn_sublayer(
        &self,
        g: &mut Graph,
        bound: &Bound,
        l: usize,
        h: NodeId,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, SublayerTap<NodeId>, Option<(NodeId, Vec<usize>)>)> {
        let layer = &self.layers[l];
        let (inner, routing) = match &layer.ffn {
            FfnBlock::Dense(ids) => (ffn_apply(g, h, &ids.bind(bound))?, None),
            FfnBlock::Moe {
                router_w,
                router_b,
                experts,
            } => {
                let experts: Vec<FfnNodes> = experts.iter().map(|e| e.bind(bound)).collect();
                let out = moe::moe_forward(g, h, bound.node(*router_w), bound.node(*router_b), &experts)?;
                (out.output, Some((out.probs, out.selected)))
            }
        };
        let inner = match dropout {
            Some(rng) => g.dropout(inner, self.config.hidden_dropout, rng)?,
            None => inner,
        };
        let adapted = self.adapter(g, bound, l, 1, inner)?;
        let sum = g.add(h, adapted)?;
        let trunk = g.layer_norm(sum, bound.node(layer.ln_g), bound.node(layer.ln_b), self.config.ln_eps)?;
        Ok((trunk, SublayerTap { trunk, inner }, routing))
    }

    /// Vocabulary logits for the given rows of `hidden`, using the token
    /// embedding table as the output projection.
    pub fn mlm_logits(&self, g: &mut Graph, bound: &Bound, hidden: NodeId, rows: &[usize]) -> Result<NodeId> {
        let picked = g.gather_rows(hidden, rows)?;
        g.matmul_nt(picked, bound.node(self.token_emb))
    }

    /// Masked-LM loss: mean cross-entropy over positions where `mask` is set.
    pub fn mlm_loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        hidden: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        if rows.is_empty() {
            return Err(TcdError::Empty("mlm_loss: no masked positions".into()));
        }
        if targets.len() != mask.len() {
            return Err(TcdError::dim("mlm_loss", &[targets.len()], &[mask.len()]));
        }
        let logits = self.mlm_logits(g, bound, hidden, &rows)?;
        let picked: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
        g.cross_entropy_masked(logits, &picked, &vec![true; rows.len()])
    }

    /// Inserts a bottleneck adapter after every sublayer output and freezes
    /// all existing parameters. The up-projection starts at zero so each
    /// adapter is initially the identity.
    pub fn attach_adapters(&mut self, size: usize, seed: u64) -> Result<()> {
        if size == 0 {
            return Err(TcdError::Config("adapter size must be >= 1".into()));
        }
        if self.has_adapters() {
            return Err(TcdError::Contract("adapters already attached".into()));
        }
        self.params.freeze_all();
        let h = self.config.hidden_dim;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, self.config.init_std).map_err(|e| TcdError::Config(e.to_string()))?,
        };
        for l in 0..self.layers.len() {
            let mut make = |site: &str| {
                let p = format!("layer.{l}.{site}.adapter");
                AdapterIds {
                    down_w: self.params.push(format!("{p}.down.weight"), init.weight(&[h, size]), ParamKind::Weight),
                    down_b: self.params.push(format!("{p}.down.bias"), Tensor::zeros(&[size]), ParamKind::Bias),
                    up_w: self.params.push(format!("{p}.up.weight"), Tensor::zeros(&[size, h]), ParamKind::Weight),
                    up_b: self.params.push(format!("{p}.up.bias"), Tensor::zeros(&[h]), ParamKind::Bias),
                }
            };
            let pair = [make("attention"), make("ffn")];
            self.adapters.push(pair);
        }
        Ok(())
    }

    /// Adds a linear head reading the first-position representation.
    pub fn attach_head(&mut self, outputs: usize, seed: u64) -> Result<()> {
        if outputs == 0 {
            return Err(TcdError::Config("head needs at least one output".into()));
        }
        if self.head.is_some() {
            return Err(TcdError::Contract("head already attached".into()));
        }
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, self.config.init_std).map_err(|e| TcdError::Config(e.to_string()))?,
        };
        let h = self.config.hidden_dim;
        let w = self.params.push("head.weight", init.weight(&[h, outputs]), ParamKind::Weight);
        let b = self.params.push("head.bias", Tensor::zeros(&[outputs]), ParamKind::Bias);
        self.head = Some(HeadIds { w, b });
        Ok(())
    }

    /// Head outputs `[batch × outputs]` from the first position of each sequence.
    pub fn head_outputs(&self, g: &mut Graph, bound: &Bound, hidden: NodeId, layout: &BatchLayout) -> Result<NodeId> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| TcdError::Contract("no head attached".into()))?;
        let first: Vec<usize> = (0..layout.batch).map(|b| b * layout.seq_len).collect();
        let cls = g.gather_rows(hidden, &first)?;
        self.linear(g, bound, cls, head.w, head.b)
    }
}

#[cfg(test)]
mod tests;
