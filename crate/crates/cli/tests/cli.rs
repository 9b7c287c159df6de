use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clspool(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clspool"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const QUICK: [&str; 4] = ["--folds", "3", "--epochs", "2"];

#[test]
fn synth_then_train_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = clspool(
        d,
        &["synth", "--n", "300", "--seed", "7", "--out", "d.jsonl"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(d.join("d.jsonl"))
            .unwrap()
            .lines()
            .count(),
        300
    );
    let o = clspool(
        d,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--schema",
            "absa",
            "--pooling",
            "lstm",
            "--out",
            "run",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("run/results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "fold,accuracy,macro_f1,f1_0,f1_1,f1_2,empty_classes"
    );
    assert_eq!(lines.len(), 1 + 10 + 2);
    assert!(lines[11].starts_with("mean,") && lines[12].starts_with("stddev,"));
    for k in 0..10 {
        assert!(d.join(format!("run/fold{k}.ckpt")).is_file());
    }
}

#[test]
fn unknown_pooling_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = clspool(dir.path(), &["train", "--pooling", "cnn"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for token in ["last", "lstm", "attention", "Usage"] {
        assert!(err.contains(token), "{err}");
    }
    let o = clspool(dir.path(), &["train", "--pooling", "LSTM"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flags_and_subcommands_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["train", "--speed", "9"],
        &["synth", "--n"],
        &[],
    ] {
        let o = clspool(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = clspool(d, &["train", "--data", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(
        d.join("bad.jsonl"),
        "{\"text\":\"a\",\"aspect\":\"b\",\"label\":\"positive\"}\nnot json\n",
    )
    .unwrap();
    let o = clspool(d, &["train", "--data", "bad.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    fs::write(d.join("x.ckpt"), b"garbage").unwrap();
    let o = clspool(
        d,
        &["eval", "--checkpoint", "x.ckpt", "--data", "bad.jsonl"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn same_flags_give_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(clspool(
        d,
        &["synth", "--n", "60", "--seed", "3", "--out", "d.jsonl"]
    )
    .status
    .success());
    let run = |out: &str| {
        let mut args = vec![
            "train",
            "--data",
            "d.jsonl",
            "--pooling",
            "attention",
            "--seed",
            "5",
            "--out",
            out,
        ];
        args.extend(["--dump-epochs", "1,2", "--dump-layers", "1,4"]);
        args.extend(QUICK);
        let o = clspool(d, &args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run("a");
    run("b");
    let mut files = Vec::new();
    for sub in ["", "dumps"] {
        for e in fs::read_dir(d.join("a").join(sub)).unwrap() {
            let e = e.unwrap();
            if e.file_type().unwrap().is_file() {
                files.push(Path::new(sub).join(e.file_name()));
            }
        }
    }
    assert_eq!(files.iter().filter(|f| f.starts_with("dumps")).count(), 4);
    for f in &files {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{}",
            f.display()
        );
    }
    assert!(
        clspool(d, &["project", "--dumps", "a/dumps", "--out", "pa"])
            .status
            .success()
    );
    assert!(
        clspool(d, &["project", "--dumps", "b/dumps", "--out", "pb"])
            .status
            .success()
    );
    let table = fs::read(d.join("pa/cluster_scores.csv")).unwrap();
    assert_eq!(table, fs::read(d.join("pb/cluster_scores.csv")).unwrap());
    assert_eq!(String::from_utf8(table).unwrap().lines().count(), 5);
    assert!(d.join("pa/proj_epoch2_layer4.csv").is_file());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(clspool(
        d,
        &["synth", "--n", "30", "--seed", "1", "--out", "d.jsonl"]
    )
    .status
    .success());
    fs::write(d.join("run.cfg"), "# quick\ndata = d.jsonl\npooling = last\nfolds = 3\nepochs = 1\nbatch_size = 8\nseed = 4\n").unwrap();
    let o = clspool(
        d,
        &[
            "train",
            "--config",
            "run.cfg",
            "--pooling",
            "attention",
            "--out",
            "r",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = fs::read_to_string(d.join("r/config.txt")).unwrap();
    assert!(resolved.contains("pooling=attention\n"), "{resolved}");
    assert!(
        resolved.contains("folds=3\n")
            && resolved.contains("batch-size=8\n")
            && resolved.contains("seed=4\n")
    );
    assert_eq!(
        fs::read_to_string(d.join("r/results.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 3 + 2
    );

    // the resolved config reproduces the run
    let o = clspool(d, &["train", "--config", "r/config.txt", "--out", "r2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read(d.join("r/results.csv")).unwrap(),
        fs::read(d.join("r2/results.csv")).unwrap()
    );

    fs::write(d.join("typo.cfg"), "data = d.jsonl\nepochz = 3\n").unwrap();
    let o = clspool(d, &["train", "--config", "typo.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"));
    fs::write(d.join("pool.cfg"), "data = d.jsonl\npooling = cnn\n").unwrap();
    assert_eq!(
        clspool(d, &["train", "--config", "pool.cfg"]).status.code(),
        Some(2)
    );
}

#[test]
fn eval_scores_a_saved_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(clspool(
        d,
        &["synth", "--n", "30", "--seed", "2", "--out", "d.jsonl"]
    )
    .status
    .success());
    let mut args = vec![
        "train",
        "--data",
        "d.jsonl",
        "--pooling",
        "last",
        "--out",
        "r",
    ];
    args.extend(QUICK);
    assert!(clspool(d, &args).status.success());
    let o = clspool(
        d,
        &["eval", "--checkpoint", "r/fold0.ckpt", "--data", "d.jsonl"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("examples=30 accuracy="), "{out}");
    assert!(out.contains("f1_2="));
}

#[test]
fn nli_schema_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(clspool(
        d,
        &["synth", "--n", "30", "--out", "n.jsonl", "--schema", "nli"]
    )
    .status
    .success());
    let text = fs::read_to_string(d.join("n.jsonl")).unwrap();
    assert!(text.contains("\"premise\"") && text.contains("\"hypothesis\""));
    let mut args = vec![
        "train",
        "--data",
        "n.jsonl",
        "--schema",
        "nli",
        "--pooling",
        "lstm",
        "--out",
        "r",
    ];
    args.extend(QUICK);
    let o = clspool(d, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = clspool(dir.path(), &["gradcheck", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(
        out.lines().count() >= 10 && out.lines().all(|l| l.starts_with("PASS ")),
        "{out}"
    );
}

#[test]
fn run_returns_exit_codes() {
    assert_eq!(
        clspool_cli::run(["clspool", "train", "--pooling", "cnn"]),
        2
    );
    assert_eq!(clspool_cli::run(["clspool", "--help"]), 0);
}
