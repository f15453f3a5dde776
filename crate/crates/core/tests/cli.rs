use std::path::Path;
use std::process::{Command, Output};

fn fbmtl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbmtl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const TINY: &[&str] = &[
    "--override",
    "data.synthetic.count=60",
    "--override",
    "data.test_count=30",
    "--override",
    "optimizer.epochs=1",
    "--override",
    "k=2",
];

#[test]
fn generate_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let mut args = vec!["gen-data", "--out", "corpus"];
    args.extend_from_slice(TINY);
    let o = fbmtl(&args, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("corpus/train.tsv").exists() && d.join("corpus/test.tsv").exists());

    let mut args = vec!["train", "--data", "corpus", "--out", "run", "--seed", "3"];
    args.extend_from_slice(TINY);
    let o = fbmtl(&args, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("run/seed3/final.ckpt").exists());

    let o = fbmtl(&["eval", "--run", "run/seed3", "--data", "corpus"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("intent_acc"));

    let o = fbmtl(&["report", "--out", "run/seed3"], d);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("slot_f1="));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&fbmtl(&["train", "--config", "missing.toml"], d)), 1);
    assert_eq!(code(&fbmtl(&["train", "--override", "loss.beta=1.5"], d)), 1);
    assert_eq!(code(&fbmtl(&["train", "--override", "no_equals_sign"], d)), 1);
    assert_eq!(code(&fbmtl(&["ablate", "--flags", "BOGUS"], d)), 1);
    assert_eq!(code(&fbmtl(&["sweep", "--param", "depth", "--values", "1"], d)), 1);
    assert_eq!(code(&fbmtl(&["no-such-command"], d)), 1);
    std::fs::write(d.join("bad.toml"), "k = 4\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&fbmtl(&["train", "--config", "bad.toml"], d)), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&fbmtl(&["train", "--data", "empty"], d)), 2);

    std::fs::create_dir(d.join("junk")).unwrap();
    std::fs::write(d.join("junk/train.tsv"), "not a valid line\n").unwrap();
    std::fs::write(d.join("junk/test.tsv"), "a\tO\tq\n").unwrap();
    assert_eq!(code(&fbmtl(&["train", "--data", "junk"], d)), 2);

    assert_eq!(code(&fbmtl(&["report", "--out", "empty"], d)), 2);
}

#[test]
fn help_exits_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbmtl(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["gen-data", "train", "eval", "ablate", "sweep", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}
