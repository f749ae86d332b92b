use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tinytrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinytrack"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn mini_set(dir: &Path, count: &str) {
    ok(&tinytrack(
        &[
            "synth",
            "--out",
            "data",
            "--seed",
            "1",
            "-s",
            &format!("count={count}"),
            "-s",
            "frames=10",
            "-s",
            "mix=true",
        ],
        dir,
    ));
}

#[test]
fn stats_table() {
    let tmp = tempfile::tempdir().unwrap();
    mini_set(tmp.path(), "3");
    let text = ok(&tinytrack(&["stats", "data", "--out", "s"], tmp.path()));
    for row in [
        "videos        3",
        "min frames    10",
        "max frames    10",
        "avg frames    10",
        "total frames",
    ] {
        assert!(text.contains(row), "missing `{row}` in\n{text}");
    }
    assert!(tmp.path().join("s/stats.json").is_file());
    assert!(tmp.path().join("s/config.txt").is_file());
}

#[test]
fn validate_names_the_broken_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    mini_set(tmp.path(), "2");
    let clean = tinytrack(&["validate", "data", "--out", "v"], tmp.path());
    assert_eq!(clean.status.code(), Some(0));

    fs::write(tmp.path().join("data/seq2/attributes.txt"), "0,0,0,0,0,0,0,0,0,0,0\n").unwrap();
    let broken = tinytrack(&["validate", "data", "--out", "v"], tmp.path());
    assert_eq!(broken.status.code(), Some(1));
    let report = fs::read_to_string(tmp.path().join("v/validation.txt")).unwrap();
    assert!(report.contains("seq2"), "{report}");
    assert!(!report.contains("seq1"), "{report}");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(tinytrack(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(
        tinytrack(&["synth", "-s", "colour=red"], tmp.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        tinytrack(&["synth", "-s", "count=many"], tmp.path()).status.code(),
        Some(2)
    );
    fs::write(tmp.path().join("c.txt"), "unknown_key = 1\n").unwrap();
    assert_eq!(
        tinytrack(&["synth", "--config", "c.txt"], tmp.path()).status.code(),
        Some(2)
    );
}

#[test]
fn split_counts() {
    let tmp = tempfile::tempdir().unwrap();
    mini_set(tmp.path(), "5");
    let text = ok(&tinytrack(
        &["split", "data", "--out", "sp", "-s", "test_count=2"],
        tmp.path(),
    ));
    assert!(text.contains("2 test / 3 train"), "{text}");
    let bad = tinytrack(&["split", "data", "--out", "sp", "-s", "test_count=6"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    mini_set(tmp.path(), "2");
    ok(&tinytrack(
        &["synth", "--config", "data/config.txt", "--out", "again"],
        tmp.path(),
    ));
    for f in [
        "seq1/groundtruth.txt",
        "seq2/attributes.txt",
        "seq2/img/00000007.png",
        "config.txt",
    ] {
        assert_eq!(
            fs::read(tmp.path().join("data").join(f)).unwrap(),
            fs::read(tmp.path().join("again").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn train_track_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    mini_set(dir, "3");
    let small = [
        "-s",
        "input_size=64",
        "-s",
        "channels=4",
        "-s",
        "hidden=8",
        "-s",
        "epochs=1",
        "-s",
        "videos_per_epoch=2",
        "-s",
        "proposal_points=3",
        "-s",
        "split=all",
    ];
    let mut args = vec!["train", "data", "--out", "teacher", "-s", "mode=none"];
    args.extend(small);
    ok(&tinytrack(&args, dir));
    ok(&tinytrack(
        &["train", "data", "--config", "teacher/config.txt", "--out", "teacher2"],
        dir,
    ));
    assert_eq!(
        fs::read(dir.join("teacher/model.bin")).unwrap(),
        fs::read(dir.join("teacher2/model.bin")).unwrap()
    );

    let mut args = vec![
        "train",
        "data",
        "--out",
        "student",
        "-s",
        "mode=full",
        "-s",
        "teacher=teacher",
    ];
    args.extend(small);
    ok(&tinytrack(&args, dir));
    let history = fs::read_to_string(dir.join("student/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    ok(&tinytrack(
        &[
            "track",
            "data",
            "--out",
            "t1",
            "-s",
            "model=teacher",
            "-s",
            "name=teacher",
        ],
        dir,
    ));
    ok(&tinytrack(
        &[
            "track",
            "data/seq1",
            "--out",
            "t2",
            "-s",
            "model=student",
            "-s",
            "name=student",
        ],
        dir,
    ));
    let text = ok(&tinytrack(
        &[
            "eval",
            "--results",
            "t1/results.json",
            "--results",
            "t2/results.json",
            "--data",
            "data",
            "--out",
            "e",
        ],
        dir,
    ));
    assert!(text.contains("teacher") && text.contains("student"), "{text}");
    for f in [
        "results.csv",
        "precision_plot.svg",
        "normalized_precision_plot.svg",
        "success_plot.svg",
        "config.txt",
    ] {
        assert!(dir.join("e").join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(dir.join("e/results.csv")).unwrap();
    assert!(csv.starts_with("tracker,subset,sequences,pr,npr,sr\n"));

    ok(&tinytrack(
        &["report", "--results", "t1/results.json", "--data", "data", "--out", "r"],
        dir,
    ));
    assert!(fs::read_to_string(dir.join("r/report.md"))
        .unwrap()
        .contains("| 1 | teacher |"));
}

#[test]
fn degrade_writes_network_sized_image() {
    let tmp = tempfile::tempdir().unwrap();
    mini_set(tmp.path(), "1");
    let text = ok(&tinytrack(
        &[
            "degrade",
            "data/seq1/img/00000001.png",
            "data/seq1/groundtruth.txt",
            "--out",
            "d",
            "-s",
            "input_size=96",
        ],
        tmp.path(),
    ));
    assert!(text.contains("size 96x96"), "{text}");
    assert!(tmp.path().join("d/degraded.png").is_file());
}
