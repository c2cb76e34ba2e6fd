//! Command-line behaviour: exit codes, determinism and report files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn polarapp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polarapp")).args(args).output().expect("spawn polarapp")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Digest over relative paths and contents of every file below `dir`.
fn dir_digest(dir: &Path) -> String {
    fn walk(root: &Path, dir: &Path, h: &mut Sha256) {
        let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            h.update(p.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
            if p.is_dir() {
                walk(root, &p, h);
            } else {
                h.update(fs::read(&p).unwrap());
            }
        }
    }
    let mut h = Sha256::new();
    walk(dir, dir, &mut h);
    hex::encode(h.finalize())
}

fn gen(dir: &Path, task: &str, count: usize, size: usize, seed: u64) -> Output {
    polarapp(&[
        "gen", "--task", task, "--count", &count.to_string(), "--size", &size.to_string(),
        "--seed", &seed.to_string(), "--out", dir.to_str().unwrap(),
    ])
}

/// A one-epoch run on 16x16 scenes with tiny networks.
fn smoke_config(dir: &Path, data: &Path, out: &str, epochs: usize) -> std::path::PathBuf {
    let cfg = dir.join(format!("{out}.json"));
    fs::write(
        &cfg,
        format!(
            r#"{{"dataset": "{}", "output_dir": "{out}", "train": {{"task": "sfp", "seed": 4, "epochs": {epochs},
            "meta_iters": 2, "batch_size": 2, "lr_inner_d": 1e-3, "lr_inner_t": 1e-3, "lr_ft": 1e-3,
            "lr_d": 1e-3, "lr_t": 1e-3, "lambda_t": 1, "lambda_fa": 1,
            "demosaicker": {{"base_channels": 2, "depth": 2, "kernel": 3}},
            "task_net": {{"base_channels": 2, "depth": 2, "kernel": 3}}, "ft_width": 2}}}}"#,
            data.display()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn gen_is_deterministic_and_uses_default_size() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(code(&gen(&a, "sfp", 10, 64, 7)), 0);
    assert_eq!(code(&gen(&b, "sfp", 10, 64, 7)), 0);
    assert_eq!(dir_digest(&a), dir_digest(&b));
    let c = t.path().join("c");
    let o = polarapp(&["gen", "--task", "sfp", "--count", "4", "--out", c.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let x = polarapp::patfile::read(&c.join("scene_0000_stack.pat")).unwrap();
    assert_eq!(x.shape(), &[12, 64, 64]);
}

#[test]
fn gen_rejects_zero_count() {
    let t = tempfile::tempdir().unwrap();
    let o = gen(&t.path().join("d"), "sfp", 0, 64, 0);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("count"));
}

#[test]
fn gen_rejects_malformed_split_ratios() {
    let t = tempfile::tempdir().unwrap();
    let o = polarapp(&["gen", "--task", "sfp", "--count", "8", "--out", t.path().join("d").to_str().unwrap(), "--split-ratios", "0.5,0.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_with_missing_config_exits_2() {
    let o = polarapp(&["train", "--config", "/nonexistent/missing.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_with_unknown_key_exits_2_before_compute() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.json");
    fs::write(&cfg, r#"{"dataset": "d", "output_dir": "o", "train": {"task": "sfp"}, "extra": 1}"#).unwrap();
    let o = polarapp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!t.path().join("o").exists());
}

#[test]
fn verify_optics_passes_and_mutation_is_caught() {
    let o = polarapp(&["verify", "--suite", "optics"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = polarapp(&["verify", "--suite", "optics", "--mutate-pattern"]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("[FAIL]") && l.contains("A(T_g I)")), "{out}");
}

#[test]
fn verify_bilevel_prints_max_relative_error() {
    let o = polarapp(&["verify", "--suite", "bilevel"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn verify_rejects_unknown_suite() {
    assert_eq!(code(&polarapp(&["verify", "--suite", "nope"])), 2);
}

#[test]
fn smoke_train_then_eval_and_infer() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    assert_eq!(code(&polarapp(&[
        "gen", "--task", "sfp", "--count", "24", "--size", "16", "--seed", "1", "--out", data.to_str().unwrap(),
        "--split-ratios", "0.5,0.25,0.125,0.125",
    ])), 0);
    let cfg = smoke_config(t.path(), &data, "run", 1);
    let o = polarapp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = t.path().join("run/checkpoint_001");
    assert!(ckpt.join("state.json").exists());
    let stdout = String::from_utf8_lossy(&o.stdout);
    for phase in ["meta", "joint", "refine", "eval"] {
        assert!(stdout.lines().any(|l| l.contains(&format!(" {phase}"))), "no {phase} row in\n{stdout}");
    }

    for (regime, tag) in [("with_A", "1x"), ("without_A", "2x")] {
        let out = t.path().join(format!("eval_{regime}"));
        let o = polarapp(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--regime", regime, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["regime"], regime);
        assert_eq!(summary["resolution"], tag);
        let csv = fs::read_to_string(out.join("eval_report.csv")).unwrap();
        let rows = polarapp::metrics::parse_report_csv(&csv).unwrap();
        assert!(rows.values().all(|v| v.len() == 3), "one row per test scene per metric");
    }

    let ident = t.path().join("eval_identity");
    let o = polarapp(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--identity", "--out", ident.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let rows = polarapp::metrics::parse_report_csv(&fs::read_to_string(ident.join("eval_report.csv")).unwrap()).unwrap();
    assert!(rows["psnr"].iter().all(|&v| v == polarapp::metrics::PSNR_CAP));

    let input = data.join("scene_0000_stack.pat");
    let inf = t.path().join("inf");
    let o = polarapp(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", inf.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = polarapp::patfile::read(&inf.join("stack.pat")).unwrap();
    assert_eq!(s.shape(), &[12, 32, 32]);
    let n = polarapp::patfile::read(&inf.join("task.pat")).unwrap();
    assert_eq!(n.shape(), &[3, 32, 32]);
}

#[test]
fn resume_reproduces_the_next_log_line() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    assert_eq!(code(&polarapp(&[
        "gen", "--task", "sfp", "--count", "16", "--size", "16", "--seed", "2", "--out", data.to_str().unwrap(),
        "--split-ratios", "0.5,0.25,0.125,0.125",
    ])), 0);
    let full = smoke_config(t.path(), &data, "full", 2);
    let o = polarapp(&["train", "--config", full.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let part = smoke_config(t.path(), &data, "part", 2);
    let o = polarapp(&["train", "--config", part.to_str().unwrap(), "--stop-after-epoch", "1"]);
    assert_eq!(code(&o), 0);
    assert!(!t.path().join("part/checkpoint_002").exists());
    let o = polarapp(&["train", "--config", part.to_str().unwrap(), "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let a = fs::read_to_string(t.path().join("full/train_log.csv")).unwrap();
    let b = fs::read_to_string(t.path().join("part/train_log.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(dir_digest(&t.path().join("full/checkpoint_002/weights")), dir_digest(&t.path().join("part/checkpoint_002/weights")));
}
