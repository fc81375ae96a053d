use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
num_identities = 6
images_per_id = 3
sents_per_id = 3
embed = 8
hidden = 8
region = 8
joint = 8
stage1_epochs = 3
phase1_epochs = 1
phase2_epochs = 1
attention = 4
importance = 4
fc = 4
decoder = 4
k_screen = 4
rerank_k = 4
ap_k = 2
";

fn xmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmatch"))
        .args(args)
        .env("XMATCH_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn xmatch")
}

fn ok(args: &[&str]) -> String {
    let out = xmatch(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.cfg");
    std::fs::write(&config, SMALL).unwrap();
    let data = root.join("data.jsonl");
    ok(&["gen-data", "--out", s(&data), "--config", s(&config)]);
    Fixture { _dir: dir, root, data, config }
}

fn stage1(f: &Fixture, name: &str, seed: &str) -> PathBuf {
    let out = f.root.join(name);
    ok(&["train-stage1", "--data", s(&f.data), "--out", s(&out), "--config", s(&f.config), "--seed", seed]);
    out
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let f = fixture();
    let a = stage1(&f, "a", "7");
    let b = stage1(&f, "b", "7");
    for file in ["manifest.json", "params.bin", "loss.csv", "run.log"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let c = stage1(&f, "c", "8");
    assert_ne!(std::fs::read(a.join("params.bin")).unwrap(), std::fs::read(c.join("params.bin")).unwrap());
    assert!(!a.join("run.lock").exists());
}

#[test]
fn two_stage_eval_writes_reports() {
    let f = fixture();
    let s1 = stage1(&f, "s1", "1");
    let s2 = f.root.join("s2");
    ok(&["train-stage2", "--data", s(&f.data), "--stage1", s(&s1), "--out", s(&s2), "--config", s(&f.config), "--seed", "2", "--no-sma"]);
    let manifest = std::fs::read_to_string(s2.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"variant\": \"no-sma\""));

    let m1 = f.root.join("m1.json");
    let m2 = f.root.join("m2.json");
    for m in [&m1, &m2] {
        let stdout = ok(&[
            "eval", "--data", s(&f.data), "--stage1", s(&s1), "--stage2", s(&s2), "--rerank", "3", "--split", "test",
            "--out", s(m),
        ]);
        assert!(stdout.contains("no-sma\ttop1"));
    }
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    let tsv = std::fs::read_to_string(m1.with_extension("tsv")).unwrap();
    assert!(tsv.starts_with("metric\tvalue\tsplit\tvariant\tseed\n"));
    assert!(tsv.contains("top1\t") && tsv.contains("\tstage1\t") && tsv.contains("\tno-sma\t2"));
    let log = std::fs::read_to_string(m1.with_extension("log")).unwrap();
    assert!(log.contains("# build = "));
}

#[test]
fn no_stage1_never_opens_stage1_dir() {
    let f = fixture();
    let out = f.root.join("bare");
    let missing = f.root.join("does-not-exist");
    ok(&[
        "train-stage2", "--data", s(&f.data), "--stage1", s(&missing), "--out", s(&out), "--config", s(&f.config),
        "--seed", "0", "--no-sma", "--no-spa", "--no-stage1",
    ]);
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"variant\": \"no-sma-spa-no-stage1\""));
    assert!(!missing.exists());
}

#[test]
fn eval_without_checkpoint_is_exit_1() {
    let f = fixture();
    let out = xmatch(&[
        "eval", "--data", s(&f.data), "--stage1", s(&f.root.join("nothing")), "--split", "test", "--out",
        s(&f.root.join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint not found"));
}

#[test]
fn version_mismatch_has_its_own_message() {
    let f = fixture();
    let s1 = stage1(&f, "s1", "0");
    let path = s1.join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 9");
    std::fs::write(&path, text).unwrap();
    let out = xmatch(&["eval", "--data", s(&f.data), "--stage1", s(&s1), "--split", "test", "--out", s(&f.root.join("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version mismatch: found 9"));
}

#[test]
fn config_errors_are_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "grid = 4\nlearning_rate = 1\n").unwrap();
    let out = xmatch(&["gen-data", "--out", s(&dir.path().join("d.jsonl")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("unknown key"), "{err}");

    let missing = xmatch(&["gen-data", "--out", s(&dir.path().join("d.jsonl")), "--config", s(&dir.path().join("none.cfg"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("io error"));

    assert_eq!(xmatch(&["train-stage1"]).status.code(), Some(1));
    assert_eq!(xmatch(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn reruns_from_the_log_reproduce() {
    let f = fixture();
    let a = stage1(&f, "a", "3");
    let out = f.root.join("again");
    ok(&["train-stage1", "--data", s(&f.data), "--out", s(&out), "--config", s(&a.join("run.log")), "--seed", "3"]);
    assert_eq!(std::fs::read(a.join("params.bin")).unwrap(), std::fs::read(out.join("params.bin")).unwrap());
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--seed", "5"]);
    assert_eq!(stdout.matches("PASS").count(), 3, "{stdout}");
    let stdout = ok(&["gradcheck", "--f64"]);
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn ablate_writes_summary() {
    let f = fixture();
    let out = f.root.join("ablation");
    let stdout = ok(&["ablate", "--data", s(&f.data), "--out", s(&out), "--seeds", "1,2", "--config", s(&f.config)]);
    assert!(stdout.starts_with("variant\tseed1\tseed2\tmean"));
    let summary = std::fs::read_to_string(out.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 7);
    for tag in ["stage1", "no-sma-spa-no-stage1", "no-sma-spa", "no-sma", "no-id", "full"] {
        assert!(summary.lines().any(|l| l.split('\t').next() == Some(tag)), "{tag}");
    }
}
