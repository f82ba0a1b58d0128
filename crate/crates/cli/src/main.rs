mod commands;
mod manifest;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcd_core::finetune::ToyTask;
use tcd_core::pipeline::corpus::Shift;
use tcd_core::pipeline::Mode;
use tcd_core::TcdError;

#[derive(Parser)]
#[command(name = "tcd", version, about = "Desk-scale BERT / MoE pre-training and distillation lab")]
struct Cli {
    /// Root that relative paths are resolved against.
    #[arg(long, global = true, env = "TCD_WORKDIR", default_value = ".")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, one sentence per line.
    GenCorpus(GenCorpusArgs),
    /// Generate a toy downstream task directory.
    GenTask(GenTaskArgs),
    /// Pre-train a teacher, an MoE baseline, or an MoE student with distillation.
    Pretrain(PretrainArgs),
    /// Run the fine-tuning grid on a checkpoint.
    Finetune(FinetuneArgs),
    /// Score a corpus with a frozen checkpoint's masked-LM head.
    OodEval(OodEvalArgs),
    /// Collect pre-training runs into a CSV table.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200_000)]
    pub tokens: usize,
    #[arg(long, default_value = "none")]
    pub shift: Shift,
}

#[derive(Args)]
pub struct GenTaskArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "presence")]
    pub task: ToyTask,
    #[arg(long, default_value_t = 256)]
    pub train_size: usize,
    #[arg(long, default_value_t = 128)]
    pub dev_size: usize,
    /// Longest text in tokens.
    #[arg(long, default_value_t = 28)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// TOML run configuration; defaults to the reference hyperparameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Mode,
    #[arg(long)]
    pub teacher_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Task directory written by `gen-task`.
    #[arg(long)]
    pub task: PathBuf,
    /// `default` or a TOML grid file.
    #[arg(long, default_value = "default")]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct OodEvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to the checkpoint's evaluation seed.
    #[arg(long)]
    pub eval_seed: Option<u64>,
    /// Directory for the result; printed only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failures that map to a specific exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Empty(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Empty(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return match f {
            Failure::Usage(_) => 2,
            Failure::Empty(_) => 1,
        };
    }
    match err.downcast_ref::<TcdError>() {
        Some(TcdError::Empty(_)) => 1,
        _ => 3,
    }
}

pub struct Workdir(PathBuf);

impl Workdir {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.0.join(p)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let wd = Workdir(cli.workdir);
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&wd, &a, &argv),
        Command::GenTask(a) => commands::gen_task(&wd, &a, &argv),
        Command::Pretrain(a) => commands::pretrain(&wd, &a, &argv),
        Command::Finetune(a) => commands::finetune(&wd, &a, &argv),
        Command::OodEval(a) => commands::ood_eval(&wd, &a, &argv),
        Command::Report(a) => report::run(&wd, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
