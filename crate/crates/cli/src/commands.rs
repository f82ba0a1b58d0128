use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{Context, Result};
use serde_json::json;
use tcd_core::finetune::{self, generate_task, FinetuneConfig, FinetuneGrid, FinetuneResult, Task, TaskSpec};
use tcd_core::pipeline::corpus::{self, CorpusConfig, Shift};
use tcd_core::pipeline::{Checkpoint, Mode, RunConfig, Trainer};
use tcd_core::TcdError;

use crate::manifest::{self, next_run_dir, RunManifest};
use crate::{FinetuneArgs, Failure, GenCorpusArgs, GenTaskArgs, OodEvalArgs, PretrainArgs, Workdir};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| TcdError::Io {
        path: path.to_path_buf(),
        source: e,
    }.into())
}

pub fn gen_corpus(wd: &Workdir, a: &GenCorpusArgs, argv: &[String]) -> Result<()> {
    let out = wd.resolve(&a.out);
    let cfg = CorpusConfig {
        seed: a.seed,
        tokens: a.tokens,
        shift: a.shift,
    };
    let text = corpus::generate(&cfg);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    let tokens = corpus::token_count(&text);
    println!("wrote {} ({tokens} tokens, shift {:?})", out.display(), a.shift);

    let shift_test = if a.shift != Shift::None {
        let reference = corpus::generate(&CorpusConfig {
            shift: Shift::None,
            ..cfg.clone()
        });
        let r = corpus::unigram_shift(&reference, &text)?;
        println!(
            "unigram chi-squared vs unshifted: statistic {:.1}, dof {}, p {:.3e}, shifted {}",
            r.statistic, r.dof, r.p_value, r.shifted
        );
        Some(r)
    } else {
        None
    };

    let mut m = RunManifest::start("gen-corpus", argv);
    m.seed = Some(a.seed);
    m.outputs.push(out.clone());
    m.details = json!({ "tokens": tokens, "shift": a.shift, "shift_test": shift_test });
    let mut sidecar = out.clone().into_os_string();
    sidecar.push(".manifest.json");
    m.write(Path::new(&sidecar))
}

pub fn gen_task(wd: &Workdir, a: &GenTaskArgs, argv: &[String]) -> Result<()> {
    let out = wd.resolve(&a.out);
    let task = generate_task(&TaskSpec {
        task: a.task,
        train_size: a.train_size,
        dev_size: a.dev_size,
        max_tokens: a.max_tokens,
        seed: a.seed,
    })?;
    task.save(&out)?;
    println!("wrote task {} to {} ({} train, {} dev)", task.name, out.display(), task.train.len(), task.dev.len());
    let mut m = RunManifest::start("gen-task", argv);
    m.seed = Some(a.seed);
    m.outputs.push(out.clone());
    m.write(&out.join(manifest::FILE))
}

pub fn pretrain(wd: &Workdir, a: &PretrainArgs, argv: &[String]) -> Result<()> {
    match (a.mode, &a.teacher_ckpt) {
        (Mode::MoeTcd, None) => return Err(Failure::Usage("--mode moe-tcd requires --teacher-ckpt".into()).into()),
        (m, Some(_)) if m != Mode::MoeTcd => {
            return Err(Failure::Usage(format!("--teacher-ckpt is only accepted with --mode moe-tcd, not {m}")).into())
        }
        _ => {}
    }
    let out = wd.resolve(&a.out);
    let corpus_path = wd.resolve(&a.corpus);
    let config_path = a.config.as_ref().map(|p| wd.resolve(p));
    let teacher_path = a.teacher_ckpt.as_ref().map(|p| wd.resolve(p));
    let resume_path = a.resume.as_ref().map(|p| wd.resolve(p));

    let resumed = resume_path.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match (&config_path, &resumed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if a.max_steps.is_some() {
        config.train.max_steps = a.max_steps;
    }
    let corpus = read_text(&corpus_path)?;
    let teacher = teacher_path.as_deref().map(Checkpoint::load).transpose()?;

    let mut trainer = match resumed {
        Some(ck) => {
            if ck.mode != a.mode {
                return Err(TcdError::Compatibility(format!("checkpoint was trained as {}, not {}", ck.mode, a.mode)).into());
            }
            Trainer::resume(&config, ck, &corpus, teacher)?
        }
        None => {
            if out.join("metrics.jsonl").exists() {
                return Err(TcdError::Config(format!("{} already holds a run; pass --resume to continue it", out.display())).into());
            }
            Trainer::new(config.clone(), a.mode, &corpus, teacher)?
        }
    };
    println!(
        "{}: {} steps ({} per epoch), starting at step {}",
        a.mode,
        trainer.total_steps(),
        trainer.steps_per_epoch(),
        trainer.step_count()
    );
    let summary = trainer.run(&out, None)?;
    for e in &summary.epochs {
        match e.val_log_likelihood {
            Some(v) => println!("epoch {:>3}  step {:>7}  val log-likelihood {v:.4}", e.epoch, e.step),
            None => println!("epoch {:>3}  step {:>7}", e.epoch, e.step),
        }
    }

    let mut m = RunManifest::start("pretrain", argv);
    m.config_hash = Some(config.hash());
    m.seed = Some(config.train.seed);
    m.input(&corpus_path)?;
    for p in [&config_path, &teacher_path, &resume_path].into_iter().flatten() {
        m.input(p)?;
    }
    m.outputs.push(out.join("metrics.jsonl"));
    m.outputs.extend(summary.checkpoints.iter().cloned());
    m.details = json!({
        "mode": a.mode,
        "steps": summary.steps,
        "finished": summary.finished,
    });
    m.write(&out.join(manifest::FILE))
}

fn load_grid(spec: &str, wd: &Workdir) -> Result<(FinetuneGrid, Option<PathBuf>)> {
    if spec == "default" {
        return Ok((FinetuneGrid::default(), None));
    }
    let path = wd.resolve(Path::new(spec));
    Ok((FinetuneGrid::from_toml(&read_text(&path)?)?, Some(path)))
}

/// Trains every cell, at most `jobs` at a time. Results keep cell order.
fn run_cells(ckpt: &Checkpoint, task: &Task, cells: &[FinetuneConfig], jobs: usize) -> Result<Vec<FinetuneResult>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<tcd_core::Result<FinetuneResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let r = finetune::finetune(ckpt, task, cell);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let slots = slots.into_inner().expect("worker panicked");
    let mut out = Vec::with_capacity(slots.len());
    for r in slots.into_iter().flatten() {
        out.push(r?);
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn finetune(wd: &Workdir, a: &FinetuneArgs, argv: &[String]) -> Result<()> {
    let ckpt_path = wd.resolve(&a.ckpt);
    let task_path = wd.resolve(&a.task);
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let task = Task::load(&task_path)?;
    let (grid, grid_path) = load_grid(&a.grid, wd)?;
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Failure::Empty("the grid has no cells".into()).into());
    }
    let dir = next_run_dir(&wd.resolve(&a.out))?;
    println!("{} cells on {} ({} jobs) -> {}", cells.len(), task.name, a.jobs, dir.display());

    let results = run_cells(&ckpt, &task, &cells, a.jobs)?;
    let mut lines = String::new();
    for r in &results {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(dir.join("results.jsonl"), lines)?;

    let per_seed = finetune::summarize_grid(&results);
    for (seed, b) in &per_seed {
        println!("seed {seed}: {:.4} ({:?})", b.metric, b.mode);
    }
    let med = median(per_seed.iter().map(|(_, b)| b.metric).collect());
    let summary = json!({
        "task": task.name,
        "checkpoint": ckpt_path,
        "mode": ckpt.mode,
        "epoch": ckpt.progress.epoch,
        "per_seed": per_seed.iter().map(|(s, b)| json!({ "seed": s, "best": b })).collect::<Vec<_>>(),
        "median": med,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    let mut m = RunManifest::start("finetune", argv);
    m.config_hash = Some(ckpt.config.hash());
    m.input(&ckpt_path)?;
    m.input(&task_path)?;
    if let Some(p) = &grid_path {
        m.input(p)?;
    }
    m.outputs = vec![dir.join("results.jsonl"), dir.join("summary.json")];
    m.details = json!({ "cells": cells.len(), "median": med });
    m.write(&dir.join(manifest::FILE))
}

pub fn ood_eval(wd: &Workdir, a: &OodEvalArgs, argv: &[String]) -> Result<()> {
    let ckpt_path = wd.resolve(&a.ckpt);
    let corpus_path = wd.resolve(&a.corpus);
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let text = read_text(&corpus_path)?;
    let eval_seed = a.eval_seed.unwrap_or(ckpt.config.train.eval_seed);
    let ll = finetune::ood_mlm_eval(&ckpt, &text, eval_seed)?;
    let result = json!({
        "checkpoint": ckpt_path,
        "corpus": corpus_path,
        "eval_seed": eval_seed,
        "log_likelihood": ll,
    });
    println!("{}", serde_json::to_string(&result)?);
    if let Some(out) = &a.out {
        let dir = next_run_dir(&wd.resolve(out))?;
        fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)? + "\n")?;
        let mut m = RunManifest::start("ood-eval", argv);
        m.config_hash = Some(ckpt.config.hash());
        m.seed = Some(eval_seed);
        m.input(&ckpt_path)?;
        m.input(&corpus_path)?;
        m.outputs.push(dir.join("result.json"));
        m.write(&dir.join(manifest::FILE))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::median;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
