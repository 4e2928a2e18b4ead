use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chatter_core::cli::{execute, run, Cli};
use chatter_core::dataset::load_dataset;
use chatter_core::model::load_model;
use clap::Parser;

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path.clone());
            }
            out.insert(path);
        }
    }
    out
}

/// Runs `args` and checks every new path starts with `target`.
fn run_confined(root: &Path, args: &[&str], target: &Path) -> i32 {
    let before = files_under(root);
    let mut argv = vec!["chatter"];
    argv.extend_from_slice(args);
    let code = run(argv);
    let target = target.to_string_lossy().into_owned();
    for path in files_under(root).difference(&before) {
        assert!(
            path.to_string_lossy().starts_with(&target),
            "{args:?} wrote {} outside {target}",
            path.display()
        );
    }
    code
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(
            run([
                "chatter",
                "synth",
                "--out",
                s(out),
                "--per-class",
                "1",
                "--seed",
                "7"
            ]),
            0
        );
    }
    let names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names.len(), 3 * 2 + 1);
    for name in names {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn full_pipeline_stays_inside_out_targets() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let data = root.join("data");
    let model = root.join("model.chmd");
    let frames = root.join("frames");

    assert_eq!(
        run_confined(
            root,
            &[
                "synth",
                "--out",
                s(&corpus),
                "--per-class",
                "12",
                "--ambiguous-frac",
                "0.25",
                "--seed",
                "3"
            ],
            &corpus
        ),
        0
    );
    assert_eq!(
        run_confined(
            root,
            &[
                "extract",
                "--in",
                s(&corpus),
                "--out",
                s(&data),
                "--seed",
                "1"
            ],
            &data
        ),
        0
    );
    let ds = load_dataset(&data).unwrap();
    assert_eq!(ds.len(), 360);

    assert_eq!(
        run_confined(
            root,
            &[
                "train",
                "--data",
                s(&data),
                "--out",
                s(&model),
                "--epochs",
                "2",
                "--seed",
                "5"
            ],
            &model
        ),
        0
    );
    let m = load_model(&model).unwrap();
    assert_eq!(m.training_log.len(), 2);
    let log = fs::read_to_string(root.join("model.chmd.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    for split in ["test", "test2"] {
        let out = root.join(format!("report_{split}"));
        assert_eq!(
            run_confined(
                root,
                &[
                    "eval",
                    "--model",
                    s(&model),
                    "--data",
                    s(&data),
                    "--split",
                    split,
                    "--out",
                    s(&out)
                ],
                &out
            ),
            0
        );
        let confusion = fs::read_to_string(out.join("confusion.csv")).unwrap();
        assert!(confusion.starts_with("true\\predicted,chatter,machining,rotation\n"));
        assert!(out.join("metrics.csv").exists());
    }

    let wav = corpus.join("chatter_00005.wav");
    let cli = Cli::try_parse_from([
        "chatter",
        "predict",
        "--model",
        s(&model),
        "--wav",
        s(&wav),
        "--emit-frames",
        s(&frames),
    ])
    .unwrap();
    let mut stdout = Vec::new();
    execute(&cli, &mut stdout).unwrap();
    let text = String::from_utf8(stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("t_start,label,p_chatter,p_machining,p_rotation")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5);
        let total: f64 = fields[2..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }
    assert_eq!(fs::read_dir(&frames).unwrap().count(), 10);
}

#[test]
fn pipeline_errors_exit_two_with_error_name() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert_eq!(
        run(["chatter", "synth", "--out", s(&corpus), "--per-class", "1"]),
        0
    );
    let out = dir.path().join("ds");
    let cli = Cli::try_parse_from([
        "chatter",
        "extract",
        "--in",
        s(&corpus),
        "--out",
        s(&out),
        "--fmax",
        "20000",
    ])
    .unwrap();
    let err = execute(&cli, &mut Vec::new()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("BandExceedsNyquist"), "{err}");
    assert_eq!(
        run([
            "chatter",
            "extract",
            "--in",
            s(&corpus),
            "--out",
            s(&out),
            "--fmax",
            "20000"
        ]),
        2
    );

    let missing = dir.path().join("nothing.chmd");
    assert_eq!(
        run([
            "chatter",
            "eval",
            "--model",
            s(&missing),
            "--data",
            s(&out),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(["chatter", "frobnicate"]), 1);
    assert_eq!(
        run(["chatter", "synth", "--out", "x", "--ambiguous-frac", "1.5"]),
        1
    );
    assert_eq!(run(["chatter", "synth", "--out", "x", "--rpm", "fast"]), 1);
    assert_eq!(
        run(
            [
                "chatter", "eval", "--model", "m", "--data", "d", "--split", "holdout", "--out",
                "r"
            ]
        ),
        1
    );
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "per-class=2\nseed=9\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(
        run(["chatter", "synth", "--config", s(&cfg), "--out", s(&a)]),
        0
    );
    assert_eq!(
        run([
            "chatter",
            "synth",
            "--config",
            s(&cfg),
            "--out",
            s(&b),
            "--per-class",
            "1"
        ]),
        0
    );
    let count = |d: &Path| {
        fs::read_dir(d)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "wav")
            })
            .count()
    };
    assert_eq!(count(&a), 6);
    assert_eq!(count(&b), 3);
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=9\n"));

    fs::write(&cfg, "learning_rate=1\n").unwrap();
    assert_eq!(
        run(["chatter", "synth", "--config", s(&cfg), "--out", s(&a)]),
        1
    );
}
