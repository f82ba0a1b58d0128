//! One CSV row per pre-training run found under `--runs`.
//!
//! A run is a subdirectory holding `metrics.jsonl`. Fine-tuning and OOD
//! results are picked up from its `finetune/run-*/summary.json` and
//! `ood/run-*/result.json` (the highest run id wins).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use tcd_core::pipeline::read_metrics;

use crate::manifest::{self, RunManifest};
use crate::{Failure, ReportArgs, Workdir};

pub const COLUMNS: [&str; 13] = [
    "run",
    "mode",
    "epoch",
    "step",
    "val_log_likelihood",
    "l_mlm",
    "l_b",
    "l_t",
    "l_i",
    "l_a",
    "task",
    "task_metric",
    "ood_log_likelihood",
];

#[derive(Debug, Default, Serialize)]
pub struct Row {
    pub run: String,
    pub mode: String,
    pub epoch: u64,
    pub step: u64,
    pub val_log_likelihood: Option<f64>,
    pub l_mlm: f64,
    pub l_b: Option<f64>,
    pub l_t: Option<f64>,
    pub l_i: Option<f64>,
    pub l_a: Option<f64>,
    pub task: Option<String>,
    pub task_metric: Option<f64>,
    pub ood_log_likelihood: Option<f64>,
}

fn latest_run(dir: &Path) -> Option<PathBuf> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let n: u32 = e.file_name().to_str()?.strip_prefix("run-")?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

fn read_json(path: &Path) -> Option<serde_json::Value> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            eprintln!("warning: ignoring {}: {e}", path.display());
            None
        }
    }
}

fn row_for(run: &Path) -> Result<Row> {
    let records = read_metrics(&run.join("metrics.jsonl"))?;
    let last = records.last().context("metrics file has no records")?;
    let val = records.iter().rev().find_map(|r| r.val_log_likelihood);
    let mode = RunManifest::read(&run.join(manifest::FILE))
        .ok()
        .and_then(|m| m.details.get("mode").and_then(|v| v.as_str()).map(str::to_string))
        .unwrap_or_default();
    let mut row = Row {
        run: run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        mode,
        epoch: last.epoch + 1,
        step: last.step,
        val_log_likelihood: val,
        l_mlm: last.l_mlm,
        l_b: last.l_b,
        l_t: last.l_t,
        l_i: last.l_i,
        l_a: last.l_a,
        ..Row::default()
    };
    if let Some(s) = latest_run(&run.join("finetune")).and_then(|d| read_json(&d.join("summary.json"))) {
        row.task = s.get("task").and_then(|v| v.as_str()).map(str::to_string);
        row.task_metric = s.get("median").and_then(|v| v.as_f64());
    }
    if let Some(r) = latest_run(&run.join("ood")).and_then(|d| read_json(&d.join("result.json"))) {
        row.ood_log_likelihood = r.get("log_likelihood").and_then(|v| v.as_f64());
    }
    Ok(row)
}

pub fn run(wd: &Workdir, a: &ReportArgs) -> Result<()> {
    let runs = wd.resolve(&a.runs);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)
        .with_context(|| format!("listing {}", runs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.jsonl").is_file())
        .collect();
    if dirs.is_empty() {
        return Err(Failure::Empty(format!("no runs with metrics.jsonl under {}", runs.display())).into());
    }
    dirs.sort();

    let out = wd.resolve(&a.out);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(COLUMNS)?;
    let mut written = 0;
    for d in &dirs {
        match row_for(d) {
            Ok(row) => {
                w.serialize(row)?;
                written += 1;
            }
            Err(e) => eprintln!("warning: skipping {}: {e:#}", d.display()),
        }
    }
    w.flush()?;
    println!("{written} of {} runs -> {}", dirs.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_row_fields() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(Row::default()).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), COLUMNS.join(","));
    }
}
