use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{array, Array2};

use more_core::data::{load_matrix, load_model, save_matrix, MatrixFormat, SavedModel};

fn more(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_more"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = more(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn synth_defaults_have_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let x = load_matrix(&data.join("x.bin"), MatrixFormat::Bin).unwrap();
    let y = load_matrix(&data.join("y.bin"), MatrixFormat::Bin).unwrap();
    assert_eq!(x.dim(), (1000, 4));
    assert_eq!(y.dim(), (1000, 3));
    let labels = fs::read_to_string(data.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1001);
    for f in ["truth.json", "manifest.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
}

#[test]
fn synth_is_reproducible_from_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--samples", "200", "--seed", "7", "--out", p(&a)]);
    ok(&["synth", "--samples", "200", "--seed", "7", "--out", p(&b)]);
    for f in ["x.bin", "y.bin", "truth.json", "labels.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_experts_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    let out = more(&["synth", "--experts", "0", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--experts"));
    assert!(!out_dir.exists());
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    let out = more(&["fit", "--x", "/nonexistent/x.csv", "--y", "/nonexistent/y.csv", "--model", p(&model)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inverted_k_range_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--samples", "50"]);
    let out = more(&[
        "select-k",
        "--x",
        p(&data.join("x.bin")),
        "--y",
        p(&data.join("y.bin")),
        "--k-min",
        "4",
        "--k-max",
        "2",
        "--out",
        p(&dir.path().join("sel")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn single_expert_data(dir: &Path) -> (PathBuf, PathBuf, Array2<f64>) {
    let w = array![[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]];
    let x = Array2::from_shape_fn((60, 3), |(i, j)| ((i * 7 + j * 13) % 11) as f64 / 5.0 - 1.0 + (i as f64 * 0.37 + j as f64).sin());
    let y = x.dot(&w.t());
    let xp = dir.join("x.csv");
    let yp = dir.join("y.csv");
    save_matrix(&xp, x.view(), MatrixFormat::Csv).unwrap();
    save_matrix(&yp, y.view(), MatrixFormat::Csv).unwrap();
    (xp, yp, w)
}

#[test]
fn single_expert_noiseless_fit_converges_and_predicts_wx() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, w) = single_expert_data(dir.path());
    let x_before = fs::read(&x).unwrap();
    let model = dir.path().join("model.json");
    let stdout = ok(&["fit", "--x", p(&x), "--y", p(&y), "--experts", "1", "--model", p(&model)]);
    assert!(stdout.contains("converged=true"), "{stdout}");
    assert_eq!(fs::read(&x).unwrap(), x_before, "input was modified");

    let SavedModel::Mixture(m) = load_model(&model).unwrap() else {
        panic!("expected a mixture model")
    };
    let fitted = m.experts()[0].weights().to_owned();
    assert!((&fitted - &w).iter().all(|d| d.abs() < 1e-6), "{fitted}");

    let pred = dir.path().join("pred.csv");
    ok(&["predict", "--model", p(&model), "--x", p(&x), "--out", p(&pred)]);
    let got = more_core::data::load_matrix_csv(&pred, false).unwrap().values;
    let xm = more_core::data::load_matrix_csv(&x, false).unwrap().values;
    let want = xm.dot(&fitted.t());
    assert_eq!(got.dim(), want.dim());
    assert!((&got - &want).iter().all(|d| d.abs() < 1e-9));
}

#[test]
fn fit_is_deterministic_and_trace_improves() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--samples", "400", "--seed", "3"]);
    let x = data.join("x.bin");
    let y = data.join("y.bin");
    let m1 = dir.path().join("m1.json");
    let m2 = dir.path().join("m2.json");
    for m in [&m1, &m2] {
        ok(&["fit", "--x", p(&x), "--y", p(&y), "--experts", "3", "--max-iters", "50", "--model", p(m)]);
    }
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    let trace = fs::read_to_string(dir.path().join("m1.trace.csv")).unwrap();
    let ll: Vec<f64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(ll.len() >= 2);
    assert!(ll.last().unwrap() >= &ll[0]);
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--samples", "100"]);
    let y = data.join("y.bin");
    let spec = format!("truth={}", p(&y));
    let out = dir.path().join("eval");
    ok(&["evaluate", "--y-true", p(&y), "--pred", &spec, "--out", p(&out)]);
    let reg = fs::read_to_string(out.join("regression.csv")).unwrap();
    let row: Vec<&str> = reg.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "truth");
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
    let table = fs::read_to_string(out.join("evaluation.csv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let micro = header.iter().position(|h| h.starts_with("micro")).unwrap();
    for line in table.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[micro].parse::<f64>().unwrap(), 1.0, "{line}");
    }
}

#[test]
fn duplicate_prediction_names_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--samples", "20"]);
    let y = data.join("y.bin");
    let spec = format!("a={}", p(&y));
    let out = more(&["evaluate", "--y-true", p(&y), "--pred", &spec, "--pred", &spec, "--out", p(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn select_k_recovers_three_experts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--samples", "1500", "--gating-scale", "3", "--seed", "1"]);
    let out = dir.path().join("sel");
    let stdout = ok(&[
        "--threads",
        "4",
        "select-k",
        "--x",
        p(&data.join("x.bin")),
        "--y",
        p(&data.join("y.bin")),
        "--k-min",
        "1",
        "--k-max",
        "5",
        "--restarts",
        "2",
        "--out",
        p(&out),
    ]);
    assert!(stdout.contains("best_k=3"), "{stdout}");
    let csv = fs::read_to_string(out.join("bic.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"samples": 30, "out_dim": 2, "seed": 4}"#).unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    let y = load_matrix(&out.join("y.bin"), MatrixFormat::Bin).unwrap();
    assert_eq!(y.dim(), (30, 2));
}

#[test]
fn ridge_and_cluster_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--samples", "120"]);
    let model = dir.path().join("ridge.json");
    let stdout = ok(&[
        "baseline-ridge",
        "--x",
        p(&data.join("x.bin")),
        "--y",
        p(&data.join("y.bin")),
        "--lambda",
        "0.1,1,10",
        "--model",
        p(&model),
    ]);
    assert!(stdout.starts_with("lambda="));
    assert!(dir.path().join("ridge.lambda_search.csv").exists());
    assert!(matches!(load_model(&model).unwrap(), SavedModel::Ridge(_)));

    let out = dir.path().join("clusters");
    ok(&["cluster", "--input", p(&data.join("y.bin")), "--k", "3", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("clusters.csv")).unwrap();
    assert_eq!(csv.lines().count(), 121);
}
