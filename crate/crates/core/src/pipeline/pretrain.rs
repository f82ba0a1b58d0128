//! The pre-training loop for the three modes.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Progress};
use super::config::{Mode, RunConfig};
use super::data::{make_mlm_batch, pack, split_lines, MlmBatch};
use super::eval::masked_log_likelihood;
use super::optim::{adam_step, lr_at, AdamState};
use super::vocab::Vocab;
use crate::autodiff::{Graph, NodeId};
use crate::distill::{self, LossComponents, LossWeights};
use crate::error::{Result, TcdError};
use crate::moe;
use crate::seed;
use crate::transformer::Model;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_mlm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_a: Option<f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_log_likelihood: Option<f64>,
}

impl MetricsRecord {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            mlm: self.l_mlm,
            balance: self.l_b,
            trunk: self.l_t,
            inner: self.l_i,
            attention: self.l_a,
        }
    }
}

/// Training and validation sequences for a corpus under a vocabulary.
pub fn prepare_sequences(corpus: &str, vocab: &Vocab, cfg: &RunConfig) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let (train, val) = split_lines(corpus, cfg.train.val_fraction)?;
    let train = pack(&train, vocab, cfg.train.seq_len)?;
    let val = if val.is_empty() { Vec::new() } else { pack(&val, vocab, cfg.train.seq_len)? };
    Ok((train, val))
}

/// Vocabulary built from the training lines of `corpus`.
pub fn build_vocab(corpus: &str, cfg: &RunConfig) -> Result<Vocab> {
    let (train, _) = split_lines(corpus, cfg.train.val_fraction)?;
    Vocab::build(&train.join("\n"), cfg.model.vocab_size)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    mode: Mode,
    config: RunConfig,
    vocab: Vocab,
    train: Vec<Vec<usize>>,
    val: Vec<Vec<usize>>,
    model: Model,
    teacher: Option<Model>,
    optimizer: AdamState,
    step: u64,
    steps_per_epoch: u64,
    total_steps: u64,
}

fn check_teacher(mode: Mode, teacher: Option<&Checkpoint>) -> Result<()> {
    match (mode.distills(), teacher) {
        (true, None) => Err(TcdError::Config("moe-tcd needs a teacher checkpoint".into())),
        (false, Some(_)) => Err(TcdError::Config(format!("{mode} does not take a teacher checkpoint"))),
        (true, Some(t)) if t.mode != Mode::Teacher => Err(TcdError::Config(format!("teacher checkpoint was trained as {}", t.mode))),
        _ => Ok(()),
    }
}

impl Trainer {
    /// Fresh run. For `moe-tcd` the teacher's vocabulary is reused so token
    /// ids agree; other modes build one from the corpus.
    pub fn new(config: RunConfig, mode: Mode, corpus: &str, teacher: Option<Checkpoint>) -> Result<Self> {
        config.validate()?;
        check_teacher(mode, teacher.as_ref())?;
        let vocab = match &teacher {
            Some(t) => t.vocab.clone(),
            None => build_vocab(corpus, &config)?,
        };
        let mut geometry = config.model.clone();
        geometry.vocab_size = vocab.len();
        let moe_cfg = mode.is_moe().then(|| config.moe.clone());
        let model = Model::new(geometry, moe_cfg, seed::derive(config.train.seed, &[seed::INIT]))?;
        let optimizer = AdamState::new(model.params());
        Self::assemble(mode, config, vocab, model, optimizer, 0, corpus, teacher)
    }

    /// Continues from `ckpt`. `config` must be the configuration it was saved with.
    pub fn resume(config: &RunConfig, ckpt: Checkpoint, corpus: &str, teacher: Option<Checkpoint>) -> Result<Self> {
        if config.hash() != ckpt.config.hash() {
            return Err(TcdError::Compatibility("run configuration differs from the checkpoint's".into()));
        }
        check_teacher(ckpt.mode, teacher.as_ref())?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| TcdError::Compatibility("checkpoint has no optimizer state".into()))?;
        if ckpt.progress.seed != ckpt.config.train.seed {
            return Err(TcdError::Corruption("rng seed disagrees with the saved configuration".into()));
        }
        Self::assemble(ckpt.mode, ckpt.config, ckpt.vocab, ckpt.model, optimizer, ckpt.progress.step, corpus, teacher)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        mode: Mode,
        config: RunConfig,
        vocab: Vocab,
        model: Model,
        optimizer: AdamState,
        step: u64,
        corpus: &str,
        teacher: Option<Checkpoint>,
    ) -> Result<Self> {
        let teacher = match teacher {
            None => None,
            Some(t) => {
                let (tc, sc) = (t.model.config(), model.config());
                if (tc.hidden_dim, tc.num_layers, tc.num_heads, tc.vocab_size) != (sc.hidden_dim, sc.num_layers, sc.num_heads, sc.vocab_size) {
                    return Err(TcdError::Compatibility(format!(
                        "teacher geometry (H={}, L={}, heads={}, V={}) does not match student (H={}, L={}, heads={}, V={})",
                        tc.hidden_dim, tc.num_layers, tc.num_heads, tc.vocab_size, sc.hidden_dim, sc.num_layers, sc.num_heads, sc.vocab_size
                    )));
                }
                if t.vocab != vocab {
                    return Err(TcdError::Compatibility("teacher vocabulary differs from the student's".into()));
                }
                Some(t.model)
            }
        };
        let (train, val) = prepare_sequences(corpus, &vocab, &config)?;
        let t = &config.train;
        let steps_per_epoch = train.len().div_ceil(t.batch_size) as u64;
        let total_steps = (t.epochs * steps_per_epoch).min(t.max_steps.unwrap_or(u64::MAX));
        if t.warmup_steps >= total_steps {
            return Err(TcdError::Config(format!(
                "warmup_steps ({}) must be below the run length ({total_steps} steps)",
                t.warmup_steps
            )));
        }
        Ok(Self {
            mode,
            config,
            vocab,
            train,
            val,
            model,
            teacher,
            optimizer,
            step,
            steps_per_epoch,
            total_steps,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn validation_sequences(&self) -> &[Vec<usize>] {
        &self.val
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::new(
            self.mode.is_moe().then_some(&self.config.moe),
            self.mode.distills().then_some(&self.config.distill),
        )
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seed::rng(self.config.train.seed, &[seed::SHUFFLE, epoch]));
        order
    }

    /// The masked batch consumed by optimizer step `step` (0-based).
    pub fn batch_for(&self, step: u64) -> Result<MlmBatch> {
        let epoch = step / self.steps_per_epoch;
        let k = (step % self.steps_per_epoch) as usize;
        let order = self.epoch_order(epoch);
        let b = self.config.train.batch_size;
        let idx = &order[k * b..((k + 1) * b).min(order.len())];
        make_mlm_batch(&self.train, idx, self.vocab.len(), &self.config.train.masking, self.config.train.seed, epoch)
    }

    /// Loss components on `batch` with current parameters, without updating.
    pub fn evaluate_losses(&self, batch: &MlmBatch, step: u64) -> Result<LossComponents> {
        let mut g = Graph::new();
        let (_, nodes) = self.losses(&mut g, batch, step, false)?;
        Ok(nodes.values(&g))
    }

    fn losses(&self, g: &mut Graph, batch: &MlmBatch, step: u64, grad: bool) -> Result<(crate::transformer::Bound, LossNodes)> {
        let train = &self.config.train;
        let bound = self.model.bind(g, grad);
        let needs_dropout = self.model.config().hidden_dropout > 0.0 || self.model.config().attention_dropout > 0.0;
        let mut drop_rng = seed::rng(train.seed, &[seed::DROPOUT, step]);
        let out = self
            .model
            .forward_bound(g, &bound, &batch.input, (grad && needs_dropout).then_some(&mut drop_rng))?;
        let mlm = self.model.mlm_loss(g, &bound, out.hidden, &batch.targets, &batch.mask)?;
        let valid = batch.input.layout.valid_rows();
        let balance = if out.router_probs.is_empty() {
            None
        } else {
            let probs = if valid.len() == batch.input.layout.tokens() {
                out.router_probs.clone()
            } else {
                out.router_probs.iter().map(|&p| g.gather_rows(p, &valid)).collect::<Result<Vec<_>>>()?
            };
            Some(moe::mean_load_balance_loss(g, &probs)?)
        };
        let (mut trunk, mut inner, mut attention) = (None, None, None);
        if let Some(teacher) = &self.teacher {
            let mut tg = Graph::new();
            let (_, tout) = teacher.forward(&mut tg, &batch.input, false)?;
            let ttaps = tout.taps.materialize(&tg);
            let dc = &self.config.distill;
            let sample = distill::sample_tokens(&valid, dc, &mut seed::rng(train.seed, &[seed::RELATION, dc.seed, step]))?;
            trunk = Some(distill::trunk_loss(g, &out.taps, &ttaps, &sample, dc.aggregate)?);
            inner = Some(distill::inner_loss(g, &out.taps, &ttaps, &sample, dc.aggregate)?);
            attention = Some(distill::attention_loss(g, &out.taps, &ttaps, dc.aggregate)?);
        }
        Ok((
            bound,
            LossNodes {
                mlm,
                balance,
                trunk,
                inner,
                attention,
            },
        ))
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        if self.is_finished() {
            return Err(TcdError::Contract(format!("run already finished at step {}", self.step)));
        }
        let step = self.step;
        let batch = self.batch_for(step)?;
        let mut g = Graph::new();
        let (bound, nodes) = self.losses(&mut g, &batch, step, true)?;
        let weights = self.weights();
        let components = nodes.values(&g);
        let total = distill::total_student_loss(&components, &weights)?;

        let mut terms = vec![(nodes.mlm, 1.0)];
        for (node, w) in [
            (nodes.balance, weights.balance),
            (nodes.trunk, weights.trunk),
            (nodes.inner, weights.inner),
            (nodes.attention, weights.attention),
        ] {
            if let Some(n) = node.filter(|_| w > 0.0) {
                terms.push((n, w));
            }
        }
        let objective = g.weighted_sum(&terms)?;
        g.backward(objective)?;
        let grads = bound.grads(&g);
        let t = &self.config.train;
        let lr = lr_at(step, t.peak_lr, t.warmup_steps, self.total_steps);
        adam_step(self.model.params_mut(), &grads, &mut self.optimizer, &t.adam, lr)?;
        self.step += 1;
        Ok(MetricsRecord {
            step: self.step,
            epoch: step / self.steps_per_epoch,
            lr,
            l_mlm: components.mlm,
            l_b: components.balance,
            l_t: components.trunk,
            l_i: components.inner,
            l_a: components.attention,
            total,
            val_log_likelihood: None,
        })
    }

    /// Validation masked-LM log-likelihood, or `None` without a held-out split.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let t = &self.config.train;
        masked_log_likelihood(&self.model, &self.val, &t.masking, t.eval_seed, t.batch_size).map(Some)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            mode: self.mode,
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            progress: Progress {
                seed: self.config.train.seed,
                step: self.step,
                epoch: self.step / self.steps_per_epoch,
            },
            vocab: self.vocab.clone(),
        }
    }

    /// Trains until the run ends or `stop_after` steps have completed,
    /// appending to `out/metrics.jsonl` and writing checkpoints under `out`.
    pub fn run(&mut self, out: &Path, stop_after: Option<u64>) -> Result<RunSummary> {
        fs::create_dir_all(out).map_err(|e| TcdError::io(out, e))?;
        let metrics_path = out.join("metrics.jsonl");
        let mut metrics = open_append(&metrics_path)?;
        let limit = stop_after.unwrap_or(u64::MAX).min(self.total_steps);
        let mut last = None;
        let mut checkpoints = Vec::new();
        let mut epochs = Vec::new();
        while self.step < limit {
            let mut rec = self.step()?;
            let epoch_end = self.step % self.steps_per_epoch == 0 || self.step == self.total_steps;
            if epoch_end {
                rec.val_log_likelihood = self.validate()?;
            }
            if self.step % self.config.train.log_every == 0 || epoch_end {
                let line = serde_json::to_string(&rec).map_err(|e| TcdError::Parse(e.to_string()))?;
                writeln!(metrics, "{line}").map_err(|e| TcdError::io(&metrics_path, e))?;
            }
            if epoch_end {
                let dir = out.join(format!("epoch-{:03}", rec.epoch + 1));
                self.checkpoint().save(&dir)?;
                epochs.push(EpochSummary {
                    epoch: rec.epoch + 1,
                    step: self.step,
                    val_log_likelihood: rec.val_log_likelihood,
                    checkpoint: dir.clone(),
                });
                checkpoints.push(dir);
            }
            let every = self.config.train.checkpoint_every;
            if every > 0 && self.step % every == 0 {
                let dir = out.join(format!("step-{:07}", self.step));
                self.checkpoint().save(&dir)?;
                checkpoints.push(dir);
            }
            last = Some(rec);
        }
        if self.is_finished() {
            let dir = out.join("final");
            self.checkpoint().save(&dir)?;
            checkpoints.push(dir);
        }
        Ok(RunSummary {
            steps: self.step,
            finished: self.is_finished(),
            last,
            epochs,
            checkpoints,
        })
    }
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| TcdError::io(path, e))
}

struct LossNodes {
    mlm: NodeId,
    balance: Option<NodeId>,
    trunk: Option<NodeId>,
    inner: Option<NodeId>,
    attention: Option<NodeId>,
}

impl LossNodes {
    fn values(&self, g: &Graph) -> LossComponents {
        let v = |n: Option<NodeId>| n.map(|n| g.value(n).item());
        LossComponents {
            mlm: g.value(self.mlm).item(),
            balance: v(self.balance),
            trunk: v(self.trunk),
            inner: v(self.inner),
            attention: v(self.attention),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub step: u64,
    pub val_log_likelihood: Option<f64>,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub finished: bool,
    pub last: Option<MetricsRecord>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
}

/// Reads `metrics.jsonl`. Any malformed line is an error.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| TcdError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TcdError::Parse(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Convenience wrapper: loads the teacher (if any) and runs to completion.
pub fn pretrain(config: &RunConfig, mode: Mode, corpus: &str, teacher: Option<&Path>, out: &Path) -> Result<RunSummary> {
    let teacher = teacher.map(Checkpoint::load).transpose()?;
    let mut trainer = Trainer::new(config.clone(), mode, corpus, teacher)?;
    trainer.run(out, None)
}
