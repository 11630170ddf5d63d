use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskmatch"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let gen = run(&[
        "gen-data", "--out", path(&data), "--classes", "3", "--height", "32", "--width", "32", "--labeled", "4",
        "--unlabeled", "6", "--val", "3", "--seed", "1",
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(data.join("manifest.json").exists());

    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "# tiny run\nmodel.base_width = 4\nmodel.depth = 2\naug.crop = 16\nmask.patch_size = 4\n\
         train.batch_labeled = 2\ntrain.batch_unlabeled = 2\n",
    )
    .unwrap();
    let train = run(&[
        "train", "--config", path(&cfg), "--data.dir", path(&data), "--out.dir", path(&out), "--train.max_iter=2",
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let saved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(saved.contains("train.max_iter = 2"));

    let ckpt = out.join("checkpoints/step_2.bin");
    let eval = run(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data)]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report = String::from_utf8_lossy(&eval.stdout);
    assert!(report.contains("mIoU"), "{report}");
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let cases: [&[&str]; 3] = [
        &["train", "--train.tau", "1.5", "--data.dir", path(dir.path())],
        &["train", "--no.such_key", "1"],
        &["eval", "--checkpoint", path(&missing), "--data", path(dir.path())],
    ];
    for args in cases {
        let out = run(args);
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
        assert_eq!(lines.len(), 1, "{args:?}: {stderr}");
        assert!(lines[0].starts_with("error: "), "{stderr}");
    }
}
