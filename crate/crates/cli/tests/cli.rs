use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn m2e(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_m2e"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn doc(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn ok(args: &[&str]) -> Value {
    let out = m2e(args, &[]);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    doc(&out)
}

fn generate(dir: &Path) -> String {
    let data = dir.join("data");
    let d = data.to_str().unwrap();
    ok(&[
        "generate",
        "--nodes",
        "8",
        "--cluster-sizes",
        "8,8",
        "--rank",
        "2",
        "--seed",
        "3",
        "--out",
        d,
    ]);
    d.to_string()
}

#[test]
fn generate_fit_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    assert!(Path::new(&data).join("dataset.toml").exists());

    let fit_dir = tmp.path().join("fit");
    let fit = ok(&[
        "fit",
        &data,
        "--rank",
        "2",
        "--max-iters",
        "100",
        "--out",
        fit_dir.to_str().unwrap(),
    ]);
    assert_eq!(fit["method"], "m2e");
    assert_eq!(fit["subjects"], 16);
    assert!(fit_dir.join("consensus.txt").exists());

    let eval_dir = tmp.path().join("eval");
    let emb = fit_dir.join("consensus.txt");
    let eval = ok(&[
        "evaluate",
        &data,
        "--embedding",
        emb.to_str().unwrap(),
        "--repetitions",
        "3",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    let acc = eval["accuracy"]["mean"].as_f64().unwrap();
    assert!((0.5..=1.0).contains(&acc));

    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    for run in metrics["runs"].as_array().unwrap() {
        let (p, r, f1) = (
            run["precision"].as_f64().unwrap(),
            run["recall"].as_f64().unwrap(),
            run["f1"].as_f64().unwrap(),
        );
        let expected = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        assert!((f1 - expected).abs() <= 1e-12);
    }

    let cl_dir = tmp.path().join("cluster");
    let labels = Path::new(&data).join("labels.txt");
    let cl = ok(&[
        "cluster",
        emb.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        cl_dir.to_str().unwrap(),
    ]);
    assert_eq!(cl["k"], 2);
    assert!(cl_dir.join("clusters.txt").exists());
}

#[test]
fn errors_produce_a_json_document_and_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = m2e(&["fit", missing.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    let d = doc(&out);
    assert_eq!(d["error"]["kind"], "io");
    assert!(d["error"]["message"].as_str().unwrap().contains("nowhere"));

    let out = m2e(&["fit"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(doc(&out)["error"]["kind"], "usage");

    let data = generate(tmp.path());
    let out = m2e(&["fit", &data, "--rank", "0"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(doc(&out)["error"]["kind"], "invalid_argument");
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let mut files = Vec::new();
    for threads in ["1", "4"] {
        let dir = tmp.path().join(format!("t{threads}"));
        let out = m2e(
            &[
                "fit",
                &data,
                "--rank",
                "2",
                "--max-iters",
                "50",
                "--out",
                dir.to_str().unwrap(),
            ],
            &[("M2E_THREADS", threads)],
        );
        assert!(out.status.success());
        files.push(std::fs::read(dir.join("consensus.txt")).unwrap());
    }
    assert_eq!(files[0], files[1]);

    let out = m2e(&["fit", &data], &[("M2E_THREADS", "zero")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn lambda_flag_overrides_per_view_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path());
    let out = tmp.path().join("fit");
    let fit = ok(&[
        "fit",
        &data,
        "--rank",
        "2",
        "--max-iters",
        "20",
        "--lambda",
        "0.5",
        "--lambda",
        "view2=3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(fit["config"]["lambdas"], serde_json::json!([0.5, 3.0]));

    let bad = m2e(&["fit", &data, "--lambda", "view9=1"], &[]);
    assert_eq!(bad.status.code(), Some(1));
}
