use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use ssr_core::harness::Progress;
use ssr_core::persist::{save_checkpoint, Checkpoint};
use ssr_core::{AdapterBank, RlsState, RunConfig};

const SMALL: &str = "\
[stream]
tasks = 3
samples_per_task = 150

[adapter]
epochs = 20
";

fn ssr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
}

fn report_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn verify_on_defaults_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssr(dir.path(), &["verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text
        .lines()
        .find(|l| l.contains("joint vs recursive"))
        .expect("residual line");
    let residual: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(residual <= 1e-9);
}

#[test]
fn verify_flags_a_broken_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::default();
    config.pipeline.expanded_dim = 3;
    let mut r = DMatrix::identity(3, 3);
    r[(0, 1)] = 0.5;
    let router = RlsState::from_parts(r, DMatrix::zeros(3, 0), DMatrix::zeros(3, 0), 1.0).unwrap();
    let ck = Checkpoint {
        config,
        router,
        bank: AdapterBank::new(),
        progress: Progress::new(8),
    };
    save_checkpoint(&ck, &dir.path().join("bad.ckpt")).unwrap();
    let o = ssr(
        dir.path(),
        &["verify", "--instances", "3", "--checkpoint", "bad.ckpt"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn single_task_report_has_no_bwt() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("one.toml"),
        "[stream]\ntasks = 1\nsamples_per_task = 40\n",
    )
    .unwrap();
    let o = ssr(
        dir.path(),
        &["train", "--config", "one.toml", "--out", "run"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = ssr(
        dir.path(),
        &["report", "--checkpoint", "run/final.ckpt", "--out", "rep"],
    );
    assert_eq!(code(&o), 0);
    assert!(!stdout(&o).contains("BWT"));
    let json = report_json(&dir.path().join("rep/report.json"));
    assert_eq!(json["accuracy"].as_array().unwrap().len(), 1);
    assert_eq!(json["accuracy"][0].as_array().unwrap().len(), 1);
    assert!(json["bwt"].is_null());
}

#[test]
fn both_orders_report_equal_op_and_bwt() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for (order, out) in [("1", "o1"), ("2", "o2")] {
        let o = ssr(
            dir.path(),
            &[
                "train",
                "--config",
                "small.toml",
                "--order",
                order,
                "--out",
                out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = report_json(&dir.path().join("o1/report.json"));
    let b = report_json(&dir.path().join("o2/report.json"));
    assert_ne!(a["task_order"], b["task_order"]);
    assert_eq!(a["op"], b["op"]);
    assert_eq!(a["bwt"], b["bwt"]);
    assert_eq!(a["bwt"].as_f64(), Some(0.0));
}

#[test]
fn repeated_runs_and_resumes_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let args = ["train", "--config", "small.toml", "--seed", "21"];
    for out in ["a", "b"] {
        let mut full = args.to_vec();
        full.extend(["--out", out]);
        assert_eq!(code(&ssr(dir.path(), &full)), 0);
    }
    let o = ssr(
        dir.path(),
        &["train", "--checkpoint", "a/phase-01.ckpt", "--out", "c"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    for file in ["final.ckpt", "report.txt", "report.csv", "report.json"] {
        assert_eq!(
            read(&format!("a/{file}")),
            read(&format!("b/{file}")),
            "{file}"
        );
        assert_eq!(
            read(&format!("a/{file}")),
            read(&format!("c/{file}")),
            "{file}"
        );
    }
}

#[test]
fn resume_rejects_conflicting_flags() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert_eq!(
        code(&ssr(
            dir.path(),
            &["train", "--config", "small.toml", "--out", "a"]
        )),
        0
    );
    let o = ssr(
        dir.path(),
        &[
            "train",
            "--checkpoint",
            "a/phase-02.ckpt",
            "--seed",
            "99",
            "--out",
            "b",
        ],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_tasks_stream_drives_eval() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = ssr(
        dir.path(),
        &["gen-tasks", "--config", "small.toml", "--out", "data"],
    );
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("data/config.toml").exists());
    let o = ssr(
        dir.path(),
        &[
            "train",
            "--config",
            "data/config.toml",
            "--stream",
            "data/stream.json",
            "--out",
            "run",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = ssr(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "run/final.ckpt",
            "--stream",
            "data/stream.json",
            "--out",
            "ev",
        ],
    );
    assert_eq!(code(&o), 0);
    let json = report_json(&dir.path().join("ev/eval.json"));
    let run = report_json(&dir.path().join("run/report.json"));
    assert_eq!(json["op"], run["op"]);
    assert_eq!(json["task_order"], run["task_order"]);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ssr(dir.path(), &[])), 1);
    assert_eq!(code(&ssr(dir.path(), &["train"])), 1);
    assert_eq!(
        code(&ssr(dir.path(), &["train", "--order", "3", "--out", "x"])),
        1
    );
    assert_eq!(code(&ssr(dir.path(), &["verify", "--instances", "0"])), 1);

    fs::write(dir.path().join("typo.toml"), "chunk_sise = 3\n").unwrap();
    assert_eq!(
        code(&ssr(
            dir.path(),
            &["gen-tasks", "--config", "typo.toml", "--out", "x"]
        )),
        1
    );
    assert_eq!(
        code(&ssr(
            dir.path(),
            &["gen-tasks", "--order", "custom", "--out", "x"]
        )),
        1
    );
    assert_eq!(
        code(&ssr(
            dir.path(),
            &["gen-tasks", "--chunk-size", "0", "--out", "x"]
        )),
        1
    );
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssr(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    for cmd in ["gen-tasks", "train", "eval", "report", "verify"] {
        assert!(stdout(&o).contains(cmd));
    }
}

#[test]
fn file_problems_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&ssr(
            dir.path(),
            &["report", "--checkpoint", "missing.ckpt"]
        )),
        3
    );
    assert_eq!(
        code(&ssr(
            dir.path(),
            &["gen-tasks", "--config", "missing.toml", "--out", "x"]
        )),
        3
    );

    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = ssr(dir.path(), &["report", "--checkpoint", "junk.ckpt"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("header"));

    small_config(dir.path());
    assert_eq!(
        code(&ssr(
            dir.path(),
            &["train", "--config", "small.toml", "--out", "run"]
        )),
        0
    );
    let full = fs::read(dir.path().join("run/final.ckpt")).unwrap();
    fs::write(dir.path().join("cut.ckpt"), &full[..full.len() / 2]).unwrap();
    let o = ssr(dir.path(), &["eval", "--checkpoint", "cut.ckpt"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape"));

    let mut skew = full.clone();
    skew[8..12].copy_from_slice(&2u32.to_le_bytes());
    fs::write(dir.path().join("skew.ckpt"), skew).unwrap();
    let o = ssr(dir.path(), &["report", "--checkpoint", "skew.ckpt"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}
