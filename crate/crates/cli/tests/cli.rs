use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lilt::checkpoint::Checkpoint;
use lilt::model::Model;

const TINY: &[&str] = &[
    "--layers", "1", "--heads", "2", "--d-text", "16", "--d-layout", "12", "--ffn-text", "32", "--ffn-layout", "24",
    "--max-len", "64", "--batch-size", "5", "--dropout", "0",
];

fn lilt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lilt"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn corpus(dir: &Path, n: usize) -> PathBuf {
    let n = n.to_string();
    ok(lilt(&["gen-corpus", "--out", "corpus", "--n-docs", &n, "--seed", "4"], dir));
    dir.join("corpus")
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn set(args: &mut [String], flag: &str, value: &str) {
    let at = args.iter().position(|a| a == flag).unwrap();
    args[at + 1] = value.to_string();
}

fn run(args: &[String], cwd: &Path) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    lilt(&refs, cwd)
}

#[test]
fn gen_corpus_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(lilt(&["gen-corpus", "--out", out, "--n-docs", "4", "--seed", "9"], dir.path()));
    }
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5, "four documents and a manifest");
    for n in names {
        let a = std::fs::read(dir.path().join("a").join(&n)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
}

#[test]
fn pretrain_zero_steps_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let args = with(&["pretrain", "--corpus", "corpus", "--out", "init.ckpt", "--steps", "0", "--seed", "5"], TINY);
    ok(run(&args, dir.path()));
    let ck = Checkpoint::load(&dir.path().join("init.ckpt")).unwrap();
    let fresh = Model::new(ck.model.config.clone(), 5).unwrap();
    for ((_, name, a), (_, _, b)) in ck.model.store.iter().zip(fresh.store.iter()) {
        assert_eq!(a, b, "{name}");
    }
    assert_eq!(ck.step, 0);
    let trace = std::fs::read_to_string(dir.path().join("init.ckpt.trace.csv")).unwrap();
    assert_eq!(trace, "step,lr,loss_mvlm,loss_kpl,loss_cai,total\n");
}

#[test]
fn pretrain_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 6);
    for out in ["a.ckpt", "b.ckpt"] {
        let mut args = with(&["pretrain", "--corpus", "corpus", "--out", out, "--steps", "4"], TINY);
        set(&mut args, "--dropout", "0.1");
        ok(run(&args, dir.path()));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.ckpt.trace.csv"), read("b.ckpt.trace.csv"));
    let (a, b) = (Checkpoint::load(&dir.path().join("a.ckpt")).unwrap(), Checkpoint::load(&dir.path().join("b.ckpt")).unwrap());
    for ((_, name, x), (_, _, y)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn geometry_mismatch_is_refused_with_a_diff() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    ok(run(&with(&["pretrain", "--corpus", "corpus", "--out", "p.ckpt", "--steps", "0"], TINY), dir.path()));
    let mut args = with(&["finetune", "--task", "ser", "--checkpoint", "p.ckpt", "--corpus", "corpus", "--out", "s.ckpt"], TINY);
    set(&mut args, "--d-text", "32");
    let out = run(&args, dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d_text: 32 != 16"), "{err}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"layrs\": 3}").unwrap();
    let out = lilt(&["--config", "bad.json", "pretrain", "--corpus", "x", "--out", "y"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = lilt(&["pretrain", "--corpus", "x", "--out", "y", "--d-layout", "50"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = lilt(&["pretrain", "--corpus", "missing", "--out", "y"], dir.path());
    assert_eq!(out.status.code(), Some(3));

    let out = lilt(&["finetune", "--task", "ser"], dir.path());
    assert_eq!(out.status.code(), Some(2), "usage error");
}

#[test]
fn non_finite_weights_exit_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    ok(run(&with(&["pretrain", "--corpus", "corpus", "--out", "p.ckpt", "--steps", "0"], TINY), dir.path()));
    let path = dir.path().join("p.ckpt");
    let mut ck = Checkpoint::load(&path).unwrap();
    let id = ck.model.store.id("layout.layer0.attn.query.weight").unwrap();
    ck.model.store.get_mut(id)[[0, 0]] = f64::NAN;
    ck.save(&path).unwrap();
    let args = with(&["finetune", "--task", "ser", "--checkpoint", "p.ckpt", "--corpus", "corpus", "--out", "s.ckpt", "--steps", "2"], TINY);
    let out = run(&args, dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("s.ckpt.last-good").exists());
    assert!(!dir.path().join("s.ckpt").exists());
}

#[test]
fn eval_and_inspect_print_json() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 3);
    let args = with(&["finetune", "--task", "re", "--scratch", "--corpus", "corpus", "--out", "re.ckpt", "--steps", "2"], TINY);
    ok(run(&args, dir.path()));
    let out = ok(lilt(&["eval", "--checkpoint", "re.ckpt", "--corpus", "corpus", "--out", "m.json"], dir.path()));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(printed["task"], "re");
    assert_eq!(printed["n_docs"], 3);

    let wrong = lilt(&["eval", "--checkpoint", "re.ckpt", "--corpus", "corpus", "--task", "ser"], dir.path());
    assert_eq!(wrong.status.code(), Some(2));

    let out = ok(lilt(&["inspect", "--checkpoint", "re.ckpt"], dir.path()));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["step"], 2);
    assert_eq!(v["config"]["task"], "re");
    assert!(v["meta"].get("vocab").is_none());
    let tensors = v["tensors"].as_array().unwrap();
    assert!(tensors.iter().any(|t| t["name"] == "head.re.bias"));
    assert!(tensors.iter().all(|t| t["l2_norm"].as_f64().unwrap().is_finite()));
}

#[test]
fn ser_overfits_five_documents() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 5);
    let args: Vec<String> = [
        "finetune", "--task", "ser", "--scratch", "--corpus", "corpus", "--out", "ser.ckpt", "--steps", "300",
        "--lr", "3e-3", "--layers", "2", "--heads", "2", "--d-text", "32", "--d-layout", "24", "--ffn-text", "64",
        "--ffn-layout", "48", "--max-len", "64", "--batch-size", "5", "--dropout", "0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ok(run(&args, dir.path()));
    let out = ok(lilt(&["eval", "--checkpoint", "ser.ckpt", "--corpus", "corpus"], dir.path()));
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["f1"], 1.0, "{m}");
}
