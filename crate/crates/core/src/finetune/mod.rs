//! Downstream fine-tuning (full or adapter) and out-of-distribution masked-LM
//! scoring.

pub mod tasks;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Result, TcdError};
use crate::pipeline::data::pack;
use crate::pipeline::eval::masked_log_likelihood;
use crate::pipeline::optim::{adam_step, lr_at, AdamConfig, AdamState};
use crate::pipeline::vocab::PAD;
use crate::pipeline::Checkpoint;
use crate::seed;
use crate::transformer::{Model, TokenBatch};

pub use tasks::{generate_task, Example, Task, TaskKind, TaskSpec, ToyTask};

/// Tasks whose tokens are mostly unknown to the vocabulary are rejected.
pub const MAX_OOV_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Full,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub adapter_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Full,
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            warmup_ratio: 0.06,
            weight_decay: 0.01,
            adapter_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub task: String,
    pub mode: FinetuneMode,
    pub lr: f64,
    pub adapter_size: Option<usize>,
    pub seed: u64,
    /// Dev metric after each epoch: accuracy or Pearson correlation.
    pub dev_metrics: Vec<f64>,
    pub best: f64,
    pub best_epoch: usize,
    pub trainable_params: usize,
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 || x.len() != y.len() {
        return 0.0;
    }
    let cov = x.covariance(y);
    let (sx, sy) = (x.std_dev(), y.std_dev());
    if sx == 0.0 || sy == 0.0 || !cov.is_finite() {
        return 0.0;
    }
    cov / (sx * sy)
}

pub fn accuracy(predicted: &[usize], labels: &[f64]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| **p as f64 == **l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Checkpoint model with a task head and, in adapter mode, frozen backbone
/// plus adapters.
pub fn prepare_model(backbone: &Model, kind: TaskKind, cfg: &FinetuneConfig) -> Result<Model> {
    let mut model = backbone.clone();
    if cfg.mode == FinetuneMode::Adapter {
        model.attach_adapters(cfg.adapter_size, seed::derive(cfg.seed, &[seed::ADAPTER]))?;
    }
    model.attach_head(kind.outputs(), seed::derive(cfg.seed, &[seed::HEAD]))?;
    Ok(model)
}

fn batch_of(seqs: &[Vec<usize>], idx: &[usize]) -> Result<TokenBatch> {
    let picked: Vec<Vec<usize>> = idx.iter().map(|&i| seqs[i].clone()).collect();
    TokenBatch::from_sequences(&picked, PAD)
}

fn predict(model: &Model, kind: TaskKind, seqs: &[Vec<usize>], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    let idx: Vec<usize> = (0..seqs.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let batch = batch_of(seqs, chunk)?;
        let mut g = Graph::new();
        let (bound, enc) = model.forward(&mut g, &batch, false)?;
        let y = model.head_outputs(&mut g, &bound, enc.hidden, &batch.layout)?;
        let y = g.value(y);
        for r in 0..chunk.len() {
            out.push(match kind {
                TaskKind::Classification { .. } => {
                    let row = y.row(r);
                    (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best }) as f64
                }
                TaskKind::Regression => y.at(r, 0),
            });
        }
    }
    Ok(out)
}

fn dev_metric(kind: TaskKind, predictions: &[f64], labels: &[f64]) -> f64 {
    match kind {
        TaskKind::Classification { .. } => {
            let p: Vec<usize> = predictions.iter().map(|&v| v as usize).collect();
            accuracy(&p, labels)
        }
        TaskKind::Regression => pearson(predictions, labels),
    }
}

/// Fine-tunes a copy of `ckpt`'s model on `task`. The router load-balance
/// term is not used here; the objective is the task loss alone.
pub fn finetune(ckpt: &Checkpoint, task: &Task, cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    task.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(TcdError::Config("finetune needs positive epochs, batch_size and lr".into()));
    }
    let text: String = task.train.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join("\n");
    let oov = ckpt.vocab.oov_fraction(&text);
    if oov > MAX_OOV_FRACTION {
        return Err(TcdError::Compatibility(format!(
            "task {}: {:.0}% of tokens are outside the checkpoint vocabulary",
            task.name,
            oov * 100.0
        )));
    }
    let max_len = ckpt.model.config().max_seq_len;
    let train = Task::encode(&task.train, &ckpt.vocab, max_len);
    let dev = Task::encode(&task.dev, &ckpt.vocab, max_len);
    let train_labels: Vec<f64> = task.train.iter().map(|e| e.label).collect();
    let dev_labels: Vec<f64> = task.dev.iter().map(|e| e.label).collect();

    let mut model = prepare_model(&ckpt.model, task.kind, cfg)?;
    let trainable_params = model.params().trainable_numel();
    let mut opt = AdamState::new(model.params());
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let warmup = (cfg.warmup_ratio * total as f64).round() as u64;
    let mut step = 0u64;
    let mut dev_metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::TASK, 2, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = batch_of(&train, chunk)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let enc = model.forward_bound(&mut g, &bound, &batch, None)?;
            let y = model.head_outputs(&mut g, &bound, enc.hidden, &batch.layout)?;
            let loss = match task.kind {
                TaskKind::Classification { .. } => {
                    let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i] as usize).collect();
                    g.cross_entropy_masked(y, &labels, &vec![true; chunk.len()])?
                }
                TaskKind::Regression => {
                    let target = Tensor::new(vec![chunk.len(), 1], chunk.iter().map(|&i| train_labels[i]).collect())?;
                    g.mse_const(y, &target)?
                }
            };
            g.backward(loss)?;
            let grads = bound.grads(&g);
            adam_step(model.params_mut(), &grads, &mut opt, &adam, lr_at(step, cfg.lr, warmup, total))?;
            step += 1;
        }
        let preds = predict(&model, task.kind, &dev, cfg.batch_size)?;
        dev_metrics.push(dev_metric(task.kind, &preds, &dev_labels));
    }
    let (best_epoch, best) = dev_metrics
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    Ok(FinetuneResult {
        task: task.name.clone(),
        mode: cfg.mode,
        lr: cfg.lr,
        adapter_size: (cfg.mode == FinetuneMode::Adapter).then_some(cfg.adapter_size),
        seed: cfg.seed,
        dev_metrics,
        best,
        best_epoch: best_epoch + 1,
        trainable_params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestOfModes {
    pub metric: f64,
    pub mode: FinetuneMode,
    /// Set when no adapter result was available.
    pub adapter_missing: bool,
}

/// The better of the two modes; ties keep full fine-tuning.
pub fn best_of_modes(full: f64, adapter: Option<f64>) -> BestOfModes {
    match adapter {
        Some(a) if a > full => BestOfModes {
            metric: a,
            mode: FinetuneMode::Adapter,
            adapter_missing: false,
        },
        Some(_) => BestOfModes {
            metric: full,
            mode: FinetuneMode::Full,
            adapter_missing: false,
        },
        None => BestOfModes {
            metric: full,
            mode: FinetuneMode::Full,
            adapter_missing: true,
        },
    }
}

/// Learning-rate and adapter-size grid. Reference learning rates are
/// multiplied by `lr_scale` for desk-scale models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneGrid {
    pub full_lrs: Vec<f64>,
    pub adapter_lrs: Vec<f64>,
    pub adapter_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for FinetuneGrid {
    fn default() -> Self {
        Self {
            full_lrs: vec![1e-5, 2e-5, 5e-5],
            adapter_lrs: vec![1e-4, 2e-4, 3e-4],
            adapter_sizes: vec![16, 64, 128],
            seeds: vec![0, 1, 2],
            lr_scale: 20.0,
            epochs: 10,
            batch_size: 32,
        }
    }
}

impl FinetuneGrid {
    /// Parses a grid file; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text).map_err(|e| TcdError::Config(e.to_string()))?;
        if grid.seeds.is_empty() || (grid.full_lrs.is_empty() && (grid.adapter_lrs.is_empty() || grid.adapter_sizes.is_empty())) {
            return Err(TcdError::Config("grid has no cells".into()));
        }
        if grid.epochs == 0 || grid.batch_size == 0 || !(grid.lr_scale > 0.0) {
            return Err(TcdError::Config("grid epochs, batch_size and lr_scale must be positive".into()));
        }
        Ok(grid)
    }

    /// Every (mode, lr, adapter size, seed) cell.
    pub fn cells(&self) -> Vec<FinetuneConfig> {
        let base = FinetuneConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            ..FinetuneConfig::default()
        };
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            for &lr in &self.full_lrs {
                cells.push(FinetuneConfig {
                    mode: FinetuneMode::Full,
                    lr: lr * self.lr_scale,
                    seed,
                    ..base.clone()
                });
            }
            for &size in &self.adapter_sizes {
                for &lr in &self.adapter_lrs {
                    cells.push(FinetuneConfig {
                        mode: FinetuneMode::Adapter,
                        lr: lr * self.lr_scale,
                        adapter_size: size,
                        seed,
                        ..base.clone()
                    });
                }
            }
        }
        cells
    }
}

/// Per-seed best over the grid for each mode, then the better mode.
pub fn summarize_grid(results: &[FinetuneResult]) -> Vec<(u64, BestOfModes)> {
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .into_iter()
        .map(|s| {
            let best = |mode| {
                results
                    .iter()
                    .filter(|r| r.seed == s && r.mode == mode)
                    .map(|r| r.best)
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            };
            let full = best(FinetuneMode::Full);
            let adapter = best(FinetuneMode::Adapter);
            let outcome = match full {
                Some(f) => best_of_modes(f, adapter),
                None => BestOfModes {
                    metric: adapter.unwrap_or(f64::NAN),
                    mode: FinetuneMode::Adapter,
                    adapter_missing: false,
                },
            };
            (s, outcome)
        })
        .collect()
}

/// Mean masked-LM log-likelihood of `corpus` under the frozen checkpoint,
/// packed and masked exactly as the pre-training validation split.
pub fn ood_mlm_eval(ckpt: &Checkpoint, corpus: &str, eval_seed: u64) -> Result<f64> {
    let lines: Vec<&str> = corpus.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(TcdError::Empty("evaluation corpus is empty".into()));
    }
    let oov = ckpt.vocab.oov_fraction(corpus);
    if oov > MAX_OOV_FRACTION {
        return Err(TcdError::Compatibility(format!("{:.0}% of corpus tokens are out of vocabulary", oov * 100.0)));
    }
    let train = &ckpt.config.train;
    let seqs = pack(&lines, &ckpt.vocab, train.seq_len)?;
    masked_log_likelihood(&ckpt.model, &seqs, &train.masking, eval_seed, train.batch_size)
}
