use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_antitune");

fn smoke_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus and base checkpoint under `root`, built with the smoke config.
fn trained(root: &Path) -> (PathBuf, PathBuf) {
    let cfg = smoke_cfg();
    let data = root.join("data");
    let base = root.join("base");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train-base", "--config", s(&cfg), "--data", s(&data), "--out", s(&base)]);
    (data, base.join("base.dnz"))
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_cfg();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
    let c = dir.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--seed", "1", "--out", s(&c)]);
    assert_ne!(read_dir_sorted(&c), fa);
}

#[test]
fn zero_epochs_leave_images_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (data, base) = trained(dir.path());
    let text = std::fs::read_to_string(smoke_cfg()).unwrap().replace("epochs = 2", "epochs = 0");
    let cfg = dir.path().join("zero.cfg");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("prot");
    ok(&["protect", "--config", s(&cfg), "--data", s(&data), "--base", s(&base), "--out", s(&out)]);
    let delta = antitune::tensor::Tensor::load(out.join("delta_000.tns")).unwrap();
    assert!(delta.data().iter().all(|&v| v == 0.0));
}

#[test]
fn step_profile_pool_beats_full_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("th");
    ok(&[
        "analyze", "theorem1", "--config", s(&smoke_cfg()), "--profile", "step500", "--out", s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("theorem1.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();
    assert_eq!(row[0], "step500");
    assert!(col("e_selected_mean") > col("e_full"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["synth"]).status.code(), Some(2));
    let missing = dir.path().join("missing.cfg");
    assert_eq!(run(&["synth", "--config", s(&missing), "--out", s(&out)]).status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "seed = 1\nno_such_key = 3\n").unwrap();
    assert_eq!(run(&["synth", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    std::fs::write(&bad, "eta = 16/255\n").unwrap();
    assert_eq!(run(&["synth", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_suite_passes() {
    let out = ok(&["verify"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    assert!(!text.contains("FAIL"));
}

#[test]
fn manifest_replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, base) = trained(dir.path());
    let out = dir.path().join("prot");
    ok(&["protect", "--config", s(&smoke_cfg()), "--data", s(&data), "--base", s(&base), "--out", s(&out)]);
    let manifest = out.join("manifest.txt");
    let replay = ok(&["verify", "--manifest", s(&manifest)]);
    let text = String::from_utf8_lossy(&replay.stdout);
    assert!(text.contains("PASS delta_000.tns"));
    assert!(!text.contains("FAIL"));

    // Tampering with a recorded input fails the replay.
    let ckpt = std::fs::read(&base).unwrap();
    let mut tampered = ckpt.clone();
    let last = tampered.len() - 1;
    tampered[last] ^= 1;
    std::fs::write(&base, tampered).unwrap();
    assert_eq!(run(&["verify", "--manifest", s(&manifest)]).status.code(), Some(1));
}
