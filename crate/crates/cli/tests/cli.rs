use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = include_str!("../../../configs/toy.toml");

fn tcd(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcd"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("spawn tcd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Corpus, toy config and a trained teacher under `wd`.
fn setup_teacher(wd: &Path) {
    fs::write(wd.join("toy.toml"), TOY).unwrap();
    ok(tcd(wd, &["gen-corpus", "--out", "corpus.txt", "--tokens", "10000", "--seed", "3"]));
    ok(tcd(
        wd,
        &["pretrain", "--config", "toy.toml", "--mode", "teacher", "--corpus", "corpus.txt", "--out", "runs/teacher"],
    ));
}

#[test]
fn gen_corpus_is_deterministic_sized_and_flags_shift() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path();
    ok(tcd(wd, &["gen-corpus", "--out", "a.txt", "--tokens", "10000", "--seed", "5"]));
    ok(tcd(wd, &["gen-corpus", "--out", "b.txt", "--tokens", "10000", "--seed", "5"]));
    let a = fs::read(wd.join("a.txt")).unwrap();
    assert_eq!(a, fs::read(wd.join("b.txt")).unwrap());
    let tokens = tcd_core::pipeline::corpus::token_count(std::str::from_utf8(&a).unwrap());
    assert!((10_000..10_050).contains(&tokens), "{tokens}");
    assert!(wd.join("a.txt.manifest.json").is_file());

    let out = ok(tcd(wd, &["gen-corpus", "--out", "c.txt", "--tokens", "10000", "--seed", "5", "--shift", "ood1"]));
    assert!(out.contains("shifted true"), "{out}");
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(wd.join("c.txt.manifest.json")).unwrap()).unwrap();
    assert_eq!(side["details"]["shift_test"]["shifted"], true);
}

#[test]
fn pretrain_flag_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path();
    fs::write(wd.join("corpus.txt"), "the cat sat .\n").unwrap();
    let o = tcd(wd, &["pretrain", "--mode", "teacher", "--teacher-ckpt", "t", "--corpus", "corpus.txt", "--out", "o"]);
    assert_eq!(code(&o), 2);
    let o = tcd(wd, &["pretrain", "--mode", "moe-tcd", "--corpus", "corpus.txt", "--out", "o"]);
    assert_eq!(code(&o), 2);
    let o = tcd(wd, &["pretrain", "--mode", "sideways", "--corpus", "corpus.txt", "--out", "o"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path();
    setup_teacher(wd);
    let teacher = wd.join("runs/teacher");
    assert!(teacher.join("metrics.jsonl").is_file());
    assert!(teacher.join("final/manifest.json").is_file());
    assert!(teacher.join("run_manifest.json").is_file());

    // Same output directory twice is refused rather than overwritten.
    let o = tcd(wd, &["pretrain", "--config", "toy.toml", "--mode", "teacher", "--corpus", "corpus.txt", "--out", "runs/teacher"]);
    assert_eq!(code(&o), 3);

    // A student whose geometry differs from the teacher's.
    fs::write(wd.join("wide.toml"), TOY.replace("hidden_dim = 32", "hidden_dim = 48")).unwrap();
    let o = tcd(
        wd,
        &[
            "pretrain", "--config", "wide.toml", "--mode", "moe-tcd", "--teacher-ckpt", "runs/teacher/final",
            "--corpus", "corpus.txt", "--out", "runs/bad",
        ],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible"));

    ok(tcd(
        wd,
        &[
            "pretrain", "--config", "toy.toml", "--mode", "moe-tcd", "--teacher-ckpt", "runs/teacher/final",
            "--corpus", "corpus.txt", "--out", "runs/tcd", "--max-steps", "20",
        ],
    ));
    ok(tcd(
        wd,
        &["pretrain", "--config", "toy.toml", "--mode", "moe-baseline", "--corpus", "corpus.txt", "--out", "runs/base", "--max-steps", "20"],
    ));

    // Fine-tuning: a one-cell grid records one run, reruns get new ids.
    ok(tcd(wd, &["gen-task", "--out", "task", "--train-size", "32", "--dev-size", "16"]));
    fs::write(wd.join("grid.toml"), "full_lrs = [5e-5]\nadapter_lrs = []\nseeds = [0]\nepochs = 1\n").unwrap();
    let ft = ["finetune", "--ckpt", "runs/teacher/final", "--task", "task", "--grid", "grid.toml", "--out", "runs/teacher/finetune"];
    ok(tcd(wd, &ft));
    ok(tcd(wd, &ft));
    let r1 = wd.join("runs/teacher/finetune/run-0001");
    let r2 = wd.join("runs/teacher/finetune/run-0002");
    assert_eq!(fs::read_to_string(r1.join("results.jsonl")).unwrap().lines().count(), 1);
    assert_eq!(fs::read(r1.join("results.jsonl")).unwrap(), fs::read(r2.join("results.jsonl")).unwrap());
    assert!(r1.join("run_manifest.json").is_file() && r1.join("summary.json").is_file());

    let o = tcd(wd, &["finetune", "--ckpt", "runs/missing", "--task", "task", "--grid", "grid.toml", "--out", "ft"]);
    assert_eq!(code(&o), 3);

    // OOD scoring.
    ok(tcd(wd, &["gen-corpus", "--out", "ood.txt", "--tokens", "3000", "--seed", "9", "--shift", "ood1"]));
    let out = ok(tcd(wd, &["ood-eval", "--ckpt", "runs/teacher/final", "--corpus", "ood.txt", "--out", "runs/teacher/ood"]));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(v["log_likelihood"].as_f64().unwrap() < 0.0);

    // Report: three runs, three rows plus header, with the documented columns.
    ok(tcd(wd, &["report", "--runs", "runs", "--out", "report.csv"]));
    let csv = fs::read_to_string(wd.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "{csv}");
    assert_eq!(
        lines[0],
        "run,mode,epoch,step,val_log_likelihood,l_mlm,l_b,l_t,l_i,l_a,task,task_metric,ood_log_likelihood"
    );
    let teacher_row = lines.iter().find(|l| l.starts_with("teacher,")).unwrap();
    assert!(teacher_row.starts_with("teacher,teacher,2,"), "{teacher_row}");
    assert!(teacher_row.contains(",presence,"), "{teacher_row}");
    let tcd_row = lines.iter().find(|l| l.starts_with("tcd,")).unwrap();
    assert!(tcd_row.starts_with("tcd,moe-tcd,"), "{tcd_row}");

    // Nothing under runs/bad was written, so it is not a run.
    assert!(!wd.join("runs/bad/metrics.jsonl").exists());
}

#[test]
fn report_skips_malformed_and_rejects_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path();
    fs::create_dir_all(wd.join("runs")).unwrap();
    let o = tcd(wd, &["report", "--runs", "runs", "--out", "r.csv"]);
    assert_eq!(code(&o), 1);

    let good = r#"{"step":1,"epoch":0,"lr":0.001,"l_mlm":5.0,"total":5.0}
{"step":2,"epoch":0,"lr":0.001,"l_mlm":4.5,"total":4.5,"val_log_likelihood":-4.4}
"#;
    for name in ["a", "b"] {
        fs::create_dir_all(wd.join("runs").join(name)).unwrap();
        fs::write(wd.join("runs").join(name).join("metrics.jsonl"), good).unwrap();
    }
    fs::create_dir_all(wd.join("runs/broken")).unwrap();
    fs::write(wd.join("runs/broken/metrics.jsonl"), "{not json\n").unwrap();
    let o = tcd(wd, &["report", "--runs", "runs", "--out", "r.csv"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: skipping"));
    let csv = fs::read_to_string(wd.join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("a,,1,2,-4.4,4.5,,,,,,,"), "{csv}");
}
