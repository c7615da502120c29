use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 3,
  "model": {"depth": 1, "width": 16, "heads": 2, "image_size": 16, "mlp_ratio": 2},
  "schedule": {"t_total": 4, "k": 2},
  "train": {"batch_size": 4, "pretrain_steps": 5, "sft_steps": 2, "sample_steps": 2},
  "corpus": {"n_train": 8, "n_held_out": 3},
  "eval": {"crop": 12, "batch_size": 2},
  "ablation": {"axes": ["arch"], "loss_window": 2}
}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tripleflow")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let o = bin(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_two() {
    let o = bin(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_one() {
    let o = bin(&["eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--ckpt"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"depht": 2}}"#).unwrap();
    assert_eq!(bin(&["schedule-dump", "--config", s(&bad)]).status.code(), Some(1));
    std::fs::write(&bad, r#"{"schedule": {"r_min": 1.5}}"#).unwrap();
    assert_eq!(bin(&["schedule-dump", "--config", s(&bad)]).status.code(), Some(1));
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(bin(&["eval", "--ckpt", s(&missing)]).status.code(), Some(1));
}

#[test]
fn schedule_dump_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["schedule-dump", "--draws", "50", "--out", s(dir.path())]);
    let csv = std::fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "p,r_sigma0,r_mc_mean");
    assert_eq!(lines.len(), 1 + 2001);
    assert_eq!(lines[1].split(',').nth(1), Some("1"));
    assert_eq!(lines[2001], "2000,0.75,0.75");
}

#[test]
fn gen_data_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    let manifest = String::from_utf8(ta.iter().find(|(p, _)| p == Path::new("manifest.csv")).unwrap().1.clone()).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 11);
    assert!(a.join("heldout/lr/00010.png").exists());
}

#[test]
fn pretrain_train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let p = dir.path().join("p");
    run_ok(&["pretrain", "--config", s(&cfg), "--out", s(&p)]);
    let base = p.join("base.ckpt");
    let log = std::fs::read_to_string(p.join("pretrain_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"event\":\"step\"")).count(), 5);

    // train needs a base checkpoint.
    assert_eq!(bin(&["train", "--config", s(&cfg), "--out", s(&p)]).status.code(), Some(1));

    let (t1, t2) = (dir.path().join("t1"), dir.path().join("t2"));
    run_ok(&["train", "--config", s(&cfg), "--ckpt", s(&base), "--out", s(&t1)]);
    run_ok(&["train", "--config", s(&cfg), "--ckpt", s(&base), "--out", s(&t2)]);
    assert_eq!(tree(&t1), tree(&t2));
    let model = t1.join("model.ckpt");
    // A trained model is not a base.
    assert_eq!(bin(&["train", "--config", s(&cfg), "--ckpt", s(&model), "--out", s(&t2)]).status.code(), Some(1));

    let e = dir.path().join("e");
    let summary = run_ok(&["eval", "--config", s(&cfg), "--ckpt", s(&model), "--out", s(&e)]);
    assert!(summary.contains("bicubic"));
    assert_eq!(std::fs::read_to_string(e.join("report.csv")).unwrap().lines().count(), 1 + 3);
    // Evaluating the base alone is refused.
    assert_eq!(bin(&["eval", "--config", s(&cfg), "--ckpt", s(&base)]).status.code(), Some(1));

    let sm = dir.path().join("s");
    run_ok(&["sample", "--config", s(&cfg), "--ckpt", s(&model), "--out", s(&sm)]);
    assert!(sm.join("00008.png").exists());
    let lr = dir.path().join("lr.png");
    std::fs::copy(dir.path().join("s/00009.png"), &lr).unwrap();
    let single = dir.path().join("single");
    run_ok(&[
        "sample", "--config", s(&cfg), "--ckpt", s(&model), "--out", s(&single), "--input", s(&lr), "--caption",
        "red circle on dark at center",
    ]);
    assert!(single.join("sr.png").exists());
    let o = bin(&["sample", "--config", s(&cfg), "--ckpt", s(&model), "--out", s(&single), "--input", s(&lr), "--caption", "a red dog"]);
    assert_eq!(o.status.code(), Some(1));

    // A config whose model does not fit the checkpoint is rejected.
    let wide = dir.path().join("wide.json");
    std::fs::write(&wide, TINY.replace("\"width\": 16", "\"width\": 32")).unwrap();
    assert_eq!(bin(&["eval", "--config", s(&wide), "--ckpt", s(&model)]).status.code(), Some(1));
}

#[test]
fn ablate_and_annotate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let out = run_ok(&["ablate", "--config", s(&cfg), "--out", s(&a)]);
    assert!(out.contains("expected trend"));
    let csv = std::fs::read_to_string(a.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(a.join("ablation_curves.csv").exists());

    let n = dir.path().join("n");
    run_ok(&["annotate", "--config", s(&cfg), "--out", s(&n), "--examples", "2"]);
    let jsonl = std::fs::read_to_string(n.join("prompts.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 3);
    assert!(jsonl.lines().all(|l| l.contains("\"peripheral\"")));

    let http = dir.path().join("http.json");
    std::fs::write(&http, TINY.replace("\"seed\": 3", "\"seed\": 3, \"annotate\": {\"endpoint\": \"http://127.0.0.1:9/none\"}")).unwrap();
    let o = bin(&["annotate", "--config", s(&http), "--out", s(&n)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("failed"));
}
