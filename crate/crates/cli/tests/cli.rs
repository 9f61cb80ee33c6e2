use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lmn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LMN_THREADS")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SPEC: &str = "users=80\nitems=60\nclusters=4\ndays=6\nseq_len=5\ncross_buckets=40\n";
const CONFIG: &str =
    "variant=lmn\nembed_dim=8\ntower=16,8\nsqrt_n=4\nk_top=3\nlr=0.05\nepochs=2\nbatch_size=32\nseed=7\n";

/// Writes the spec and config files and generates a dataset into `data/`.
fn setup(dir: &Path) {
    fs::write(dir.join("spec.txt"), SPEC).unwrap();
    fs::write(dir.join("cfg.txt"), CONFIG).unwrap();
    ok(lmn(&["gen-data", "--spec", "spec.txt", "--out", "data"], dir));
}

#[test]
fn gen_data_is_bytewise_stable() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = ok(lmn(&["gen-data", "--spec", "spec.txt", "--out", "again"], dir.path()));
    assert!(out.starts_with("split,samples,clicks\ntrain,"));
    for f in ["train.csv", "eval.csv", "meta.txt", "spec.txt"] {
        assert_eq!(
            fs::read(dir.path().join("data").join(f)).unwrap(),
            fs::read(dir.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    ok(lmn(
        &["gen-data", "--spec", "spec.txt", "--out", "other", "--seed", "9"],
        dir.path(),
    ));
    assert_ne!(
        fs::read(dir.path().join("data/train.csv")).unwrap(),
        fs::read(dir.path().join("other/train.csv")).unwrap()
    );
}

#[test]
fn train_writes_artifacts_and_manifest_replays() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let report = ok(lmn(
        &["train", "--config", "cfg.txt", "--data", "data", "--out", "run1"],
        d,
    ));
    assert!(report.starts_with("epoch,steps,train_logloss,train_memory_loss,auc,"));
    assert_eq!(report.lines().count(), 3);
    for f in ["model.ckpt", "report.csv", "config.txt", "manifest.csv"] {
        assert!(d.join("run1").join(f).is_file(), "{f}");
    }
    let manifest = fs::read_to_string(d.join("run1/manifest.csv")).unwrap();
    assert!(manifest.contains("seed,7") && manifest.contains("seconds.train,"));

    // replay from a different working directory
    let sub = d.join("elsewhere");
    fs::create_dir(&sub).unwrap();
    ok(lmn(
        &["train", "--manifest", "../run1/manifest.csv", "--out", "run2"],
        &sub,
    ));
    for f in ["model.ckpt", "report.csv", "config.txt"] {
        assert_eq!(
            fs::read(d.join("run1").join(f)).unwrap(),
            fs::read(sub.join("run2").join(f)).unwrap(),
            "{f}"
        );
    }
    // the snapshot is itself a valid config
    ok(lmn(
        &[
            "train",
            "--config",
            "run1/config.txt",
            "--data",
            "data",
            "--out",
            "run3",
        ],
        d,
    ));
    assert_eq!(
        fs::read(d.join("run1/model.ckpt")).unwrap(),
        fs::read(d.join("run3/model.ckpt")).unwrap()
    );
}

#[test]
fn eval_is_deterministic_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(lmn(
        &["train", "--config", "cfg.txt", "--data", "data", "--out", "a"],
        d,
    ));
    ok(lmn(
        &["train", "--config", "cfg.txt", "--data", "data", "--out", "b"],
        d,
    ));
    let ra = ok(lmn(
        &[
            "eval",
            "--checkpoint",
            "a/model.ckpt",
            "--data",
            "data",
            "--batch-size",
            "16",
        ],
        d,
    ));
    let rb = ok(lmn(
        &[
            "eval",
            "--checkpoint",
            "b/model.ckpt",
            "--data",
            "data",
            "--out",
            "eval.csv",
        ],
        d,
    ));
    assert_eq!(ra, rb);
    assert_eq!(fs::read_to_string(d.join("eval.csv")).unwrap(), rb);
    assert!(ra.starts_with("auc,auc_imp_pct,logloss,logloss_imp_pct,samples\n"));

    let threaded = Command::new(env!("CARGO_BIN_EXE_lmn"))
        .args([
            "eval",
            "--checkpoint",
            "a/model.ckpt",
            "--data",
            "data/eval.csv",
            "--batch-size",
            "16",
        ])
        .current_dir(d)
        .env("LMN_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(ok(threaded), ra);

    let vs_self = ok(lmn(
        &[
            "eval",
            "--checkpoint",
            "a/model.ckpt",
            "--data",
            "data",
            "--base",
            "b/model.ckpt",
        ],
        d,
    ));
    let row = vs_self.lines().nth(1).unwrap();
    assert_eq!(row.split(',').nth(1), Some("0.00"));
    assert_eq!(row.split(',').nth(3), Some("0.00"));
}

#[test]
fn check_grad_reports_pass_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmn(&["check-grad"], dir.path());
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    let table = ok(out);
    assert!(stderr.starts_with("PASS, max rel err"), "{stderr}");
    assert!(table.starts_with("block,entries,max_rel_err,worst_index,status\n"));
    assert!(table.contains("memory.values,64,"));

    let strict = lmn(&["check-grad", "--tolerance", "0"], dir.path());
    assert!(!strict.status.success());
    assert!(String::from_utf8_lossy(&strict.stderr).contains("FAIL"));
}

#[test]
fn bench_scaling_counts() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "bench-scaling",
        "--sqrt-n",
        "50,500",
        "--d",
        "16",
        "--reps",
        "1",
        "--min-round-ms",
        "1",
        "--naive",
        "false",
    ];
    let table = ok(lmn(&args, dir.path()));
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let col = |r: usize, c: usize| rows[r][c].parse::<f64>().unwrap();
    assert_eq!(col(1, 3) / col(0, 3), 10.0);
    assert_eq!(col(1, 4) / col(0, 4), 100.0);
    assert_eq!(rows[0][6], "");
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: &[&[&str]] = &[
        &["bench-scaling", "--bogus", "1"],
        &["train", "--config", "cfg.txt"],
        &[
            "train",
            "--config",
            "cfg.txt",
            "--data",
            "data",
            "--manifest",
            "m.csv",
            "--out",
            "x",
        ],
        &["eval", "--checkpoint", "missing.ckpt", "--data", "data"],
        &["bench-scaling", "--naive"],
        &["check-grad", "--config", "bad.txt"],
        &["frobnicate"],
    ];
    fs::write(d.join("bad.txt"), "learning_rate=0.1\n").unwrap();
    for args in cases {
        let out = lmn(args, d);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_lmn"))
        .arg("check-grad")
        .env("LMN_THREADS", "many")
        .output()
        .unwrap();
    assert!(!bad_threads.status.success());
    assert!(String::from_utf8_lossy(&bad_threads.stderr).contains("LMN_THREADS"));
}
