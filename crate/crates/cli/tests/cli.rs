//! End-to-end tests of the `icr` binary: every subcommand, exit codes, and
//! byte-for-byte determinism across thread counts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn icr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_icr"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("failed to spawn icr")
}

fn ok(args: &[&str]) -> String {
    let out = icr(args, &[]);
    assert!(
        out.status.success(),
        "icr {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {path:?}: {e}"))
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let train = root.join("train");
    let test = root.join("test");
    let extra = root.join("extra");
    let empty = root.join("empty");
    fs::create_dir_all(empty.join("images")).unwrap();
    fs::create_dir_all(empty.join("annotations")).unwrap();

    for (dest, samples, seed) in [(&train, "40", "11"), (&test, "15", "12"), (&extra, "10", "13")]
    {
        ok(&[
            "synth",
            "--out",
            dest.to_str().unwrap(),
            "--samples",
            samples,
            "--landmarks",
            "5",
            "--noise",
            "0.02",
            "--seed",
            seed,
        ]);
        assert!(dest.join("images").is_dir());
        assert!(dest.join("annotations").is_dir());
        assert!(dest.join("bboxes.csv").is_file());
    }

    // Sequential training, then evaluation.
    let model = root.join("seq.icr");
    ok(&[
        "train",
        "--data",
        train.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--stages",
        "2",
        "--hidden-nodes",
        "30",
        "--ridge",
        "1.0",
        "--seed",
        "5",
    ]);
    assert!(model.is_file());

    let ced = root.join("ced.csv");
    let errors = root.join("errors.csv");
    let stdout = ok(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--ced-out",
        ced.to_str().unwrap(),
        "--errors-out",
        errors.to_str().unwrap(),
    ]);
    assert!(
        stdout.contains("mean NME:") && stdout.contains("over 15 images"),
        "unexpected eval output: {stdout}"
    );
    let ced_lines = csv_lines(&ced);
    assert_eq!(ced_lines[0], "threshold,fraction");
    assert_eq!(ced_lines.len(), 32, "31 thresholds plus header");
    let err_lines = csv_lines(&errors);
    assert_eq!(err_lines[0], "id,nme");
    assert_eq!(err_lines.len(), 16);

    // Parallel training derives statistics from its own sequential pass.
    let par_model = root.join("par.icr");
    ok(&[
        "train",
        "--data",
        train.to_str().unwrap(),
        "--out",
        par_model.to_str().unwrap(),
        "--mode",
        "parallel",
        "--stages",
        "2",
        "--hidden-nodes",
        "30",
        "--ridge",
        "1.0",
        "--seed",
        "5",
        "--perturbations",
        "2",
    ]);
    assert!(par_model.is_file());
    assert_ne!(fs::read(&model).unwrap(), fs::read(&par_model).unwrap());

    // Incremental update absorbs the extra directory and reports per-stage work.
    let updated = root.join("updated.icr");
    let report = root.join("report.csv");
    let stdout = ok(&[
        "update",
        "--model",
        model.to_str().unwrap(),
        "--data",
        extra.to_str().unwrap(),
        "--out",
        updated.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(stdout.contains("absorbed 10 images into 2 stages"), "{stdout}");
    let report_lines = csv_lines(&report);
    assert_eq!(report_lines[0], "stage,rows,feature_millis,update_millis");
    assert_eq!(report_lines.len(), 3);
    for (i, line) in report_lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{i},10,")), "report row: {line}");
    }
    assert_ne!(fs::read(&model).unwrap(), fs::read(&updated).unwrap());

    // An update with no images must leave the model bytes untouched.
    let noop = root.join("noop.icr");
    ok(&[
        "update",
        "--model",
        model.to_str().unwrap(),
        "--data",
        empty.to_str().unwrap(),
        "--out",
        noop.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(&model).unwrap(), fs::read(&noop).unwrap());

    // Prediction writes one pts file per image, in source pixel coordinates.
    let preds = root.join("preds");
    ok(&[
        "predict",
        "--model",
        updated.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--out-dir",
        preds.to_str().unwrap(),
    ]);
    let mut pts: Vec<_> = fs::read_dir(&preds)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    pts.sort();
    assert_eq!(pts.len(), 15);
    let first = fs::read_to_string(&pts[0]).unwrap();
    assert!(first.starts_with("version: 1\nn_points: 5\n{\n"), "{first}");

    // The incremental-learning benchmark writes a summary and per-step curves.
    let exp = root.join("exp");
    let stdout = ok(&[
        "experiment-incremental",
        "--data",
        train.to_str().unwrap(),
        "--test-data",
        test.to_str().unwrap(),
        "--out-dir",
        exp.to_str().unwrap(),
        "--batches",
        "3",
        "--stages",
        "2",
        "--hidden-nodes",
        "30",
        "--ridge",
        "1.0",
        "--seed",
        "5",
    ]);
    assert!(stdout.contains("batch 1/3"), "{stdout}");
    let summary = csv_lines(&exp.join("summary.csv"));
    assert_eq!(summary[0], "batch_pct,mean_nme,update_millis");
    assert_eq!(summary.len(), 4);
    let pcts: Vec<u64> = summary[1..]
        .iter()
        .map(|line| line.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(pcts.windows(2).all(|p| p[0] < p[1]), "percentages not increasing: {pcts:?}");
    assert_eq!(*pcts.last().unwrap(), 100);
    for pct in &pcts {
        assert!(exp.join(format!("ced_{pct:03}.csv")).is_file());
    }
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    let out = icr(&["train", "--no-such-flag"], &[]);
    assert_eq!(out.status.code(), Some(2), "usage errors exit 2");

    let out = icr(
        &["eval", "--model", "/nonexistent/model.icr", "--data", "/nonexistent"],
        &[],
    );
    assert_eq!(out.status.code(), Some(1), "runtime errors exit 1");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
}

#[test]
fn thread_count_does_not_change_model_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--samples",
        "20",
        "--landmarks",
        "5",
        "--noise",
        "0.02",
        "--seed",
        "21",
    ]);

    let mut bytes = Vec::new();
    for threads in ["1", "4"] {
        let model = root.join(format!("m{threads}.icr"));
        let out = icr(
            &[
                "train",
                "--data",
                data.to_str().unwrap(),
                "--out",
                model.to_str().unwrap(),
                "--mode",
                "parallel",
                "--stages",
                "2",
                "--hidden-nodes",
                "25",
                "--ridge",
                "1.0",
                "--seed",
                "3",
            ],
            &[("ICR_THREADS", threads)],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        bytes.push(fs::read(&model).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "model bytes depend on ICR_THREADS");
}
