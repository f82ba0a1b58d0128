//! Seeded toy downstream tasks built from grammar sentences, stored as
//! line-delimited `{"text", "label"}` records.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcdError};
use crate::pipeline::corpus::{generate, CorpusConfig};
use crate::pipeline::vocab::{tokenize, Vocab, CLS, SEP};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

/// Shipped generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTask {
    /// Does the marker word occur? Linearly separable.
    Presence,
    /// Is the marker count odd?
    Parity,
    /// How many times does the marker occur?
    Count,
}

impl FromStr for ToyTask {
    type Err = TcdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "presence" => Ok(ToyTask::Presence),
            "parity" => Ok(ToyTask::Parity),
            "count" => Ok(ToyTask::Count),
            other => Err(TcdError::Config(format!("unknown task {other:?}; expected presence, parity or count"))),
        }
    }
}

impl ToyTask {
    pub fn name(self) -> &'static str {
        match self {
            ToyTask::Presence => "presence",
            ToyTask::Parity => "parity",
            ToyTask::Count => "count",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            ToyTask::Presence | ToyTask::Parity => TaskKind::Classification { classes: 2 },
            ToyTask::Count => TaskKind::Regression,
        }
    }

    fn marker(self) -> &'static str {
        match self {
            ToyTask::Presence => "happy",
            ToyTask::Parity | ToyTask::Count => "the",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: ToyTask,
    pub train_size: usize,
    pub dev_size: usize,
    /// Longest text in tokens, excluding `[CLS]`/`[SEP]`.
    pub max_tokens: usize,
    pub seed: u64,
}

/// Generates a task from sentences of the in-distribution grammar. Texts join
/// one to three sentences. Classification tasks are class balanced.
pub fn generate_task(spec: &TaskSpec) -> Result<Task> {
    let need = spec.train_size + spec.dev_size;
    if spec.train_size == 0 || spec.dev_size == 0 {
        return Err(TcdError::Config("task needs nonempty train and dev splits".into()));
    }
    let sentences: Vec<String> = generate(&CorpusConfig {
        seed: seed::derive(spec.seed, &[seed::TASK]),
        tokens: need * 40 + 1000,
        shift: Default::default(),
    })
    .lines()
    .map(str::to_string)
    .collect();
    let mut rng = seed::rng(spec.seed, &[seed::TASK, 1]);
    let marker = spec.task.marker();
    let classes = spec.task.kind().outputs();
    let mut buckets: Vec<Vec<Example>> = vec![Vec::new(); classes];
    let per_class = need.div_ceil(classes);
    let mut attempts = 0;
    while buckets.iter().any(|b| b.len() < per_class) {
        attempts += 1;
        if attempts > need * 200 {
            return Err(TcdError::Config(format!("could not fill task {} within max_tokens {}", spec.task.name(), spec.max_tokens)));
        }
        let parts = rng.random_range(1..=3);
        let text = (0..parts)
            .map(|_| sentences[rng.random_range(0..sentences.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let toks = tokenize(&text);
        if toks.len() > spec.max_tokens {
            continue;
        }
        let count = toks.iter().filter(|t| **t == marker).count();
        let (bucket, label) = match spec.task {
            ToyTask::Presence => (usize::from(count > 0), f64::from(u8::from(count > 0))),
            ToyTask::Parity => (count % 2, (count % 2) as f64),
            ToyTask::Count => (0, count as f64),
        };
        if buckets[bucket].len() < per_class {
            buckets[bucket].push(Example { text, label });
        }
    }
    let mut all: Vec<Example> = buckets.into_iter().flatten().collect();
    all.shuffle(&mut rng);
    all.truncate(need);
    let dev = all.split_off(spec.train_size);
    Ok(Task {
        name: spec.task.name().to_string(),
        kind: spec.task.kind(),
        train: all,
        dev,
    })
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.dev.is_empty() || self.train.is_empty() {
            return Err(TcdError::Empty(format!("task {}: empty split", self.name)));
        }
        for e in self.train.iter().chain(&self.dev) {
            let ok = match self.kind {
                TaskKind::Classification { classes } => e.label.fract() == 0.0 && e.label >= 0.0 && (e.label as usize) < classes,
                TaskKind::Regression => e.label.is_finite(),
            };
            if !ok {
                return Err(TcdError::Parse(format!("task {}: invalid label {} for {:?}", self.name, e.label, self.kind)));
            }
        }
        Ok(())
    }

    /// `[CLS] text [SEP]` ids, clipped to `max_len`.
    pub fn encode(examples: &[Example], vocab: &Vocab, max_len: usize) -> Vec<Vec<usize>> {
        examples
            .iter()
            .map(|e| {
                let mut ids = vec![CLS];
                ids.extend(vocab.encode(&e.text).into_iter().take(max_len.saturating_sub(2)));
                ids.push(SEP);
                ids
            })
            .collect()
    }

    /// Writes `train.jsonl`, `dev.jsonl` and `task.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| TcdError::io(dir, e))?;
        let meta = serde_json::json!({ "name": self.name, "kind": self.kind });
        let write = |name: &str, body: String| fs::write(dir.join(name), body).map_err(|e| TcdError::io(dir.join(name), e));
        write("task.json", format!("{meta}\n"))?;
        for (name, split) in [("train.jsonl", &self.train), ("dev.jsonl", &self.dev)] {
            let mut body = String::new();
            for e in split {
                body.push_str(&serde_json::to_string(e).map_err(|e| TcdError::Parse(e.to_string()))?);
                body.push('\n');
            }
            write(name, body)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            name: String,
            kind: TaskKind,
        }
        let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| TcdError::io(dir.join(name), e));
        let meta: Meta = serde_json::from_str(&read("task.json")?).map_err(|e| TcdError::Parse(format!("task.json: {e}")))?;
        let parse = |name: &str| -> Result<Vec<Example>> {
            read(name)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| TcdError::Parse(format!("{name}:{}: {e}", i + 1))))
                .collect()
        };
        let task = Task {
            name: meta.name,
            kind: meta.kind,
            train: parse("train.jsonl")?,
            dev: parse("dev.jsonl")?,
        };
        task.validate()?;
        Ok(task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: ToyTask) -> TaskSpec {
        TaskSpec {
            task,
            train_size: 64,
            dev_size: 32,
            max_tokens: 30,
            seed: 3,
        }
    }

    #[test]
    fn labels_follow_the_marker() {
        for t in [ToyTask::Presence, ToyTask::Parity, ToyTask::Count] {
            let task = generate_task(&spec(t)).unwrap();
            task.validate().unwrap();
            assert_eq!((task.train.len(), task.dev.len()), (64, 32));
            for e in task.train.iter().chain(&task.dev) {
                let n = tokenize(&e.text).iter().filter(|w| **w == t.marker()).count();
                let expect = match t {
                    ToyTask::Presence => f64::from(u8::from(n > 0)),
                    ToyTask::Parity => (n % 2) as f64,
                    ToyTask::Count => n as f64,
                };
                assert_eq!(e.label, expect);
                assert!(tokenize(&e.text).len() <= 30);
            }
        }
    }

    #[test]
    fn classification_is_balanced_and_seeded() {
        let task = generate_task(&spec(ToyTask::Parity)).unwrap();
        let ones = task.train.iter().chain(&task.dev).filter(|e| e.label == 1.0).count();
        assert_eq!(ones, 48);
        assert_eq!(task, generate_task(&spec(ToyTask::Parity)).unwrap());
    }

    #[test]
    fn save_load_and_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        let task = generate_task(&spec(ToyTask::Count)).unwrap();
        task.save(dir.path()).unwrap();
        assert_eq!(Task::load(dir.path()).unwrap(), task);
        let mut bad = generate_task(&spec(ToyTask::Presence)).unwrap();
        bad.dev[0].label = 2.0;
        assert!(bad.validate().is_err());
    }
}
