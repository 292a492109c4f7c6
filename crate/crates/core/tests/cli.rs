use std::fs;
use std::path::Path;
use std::process::Command;

use qkdopt::cli::run_from;
use qkdopt::dataset::{denormalize, SampleRanges, TrainingSet};
use qkdopt::lut::GridSpec;
use qkdopt::mlp::{MlpModel, DEFAULT_DIMS};
use qkdopt::DeviceConstants;

fn run(args: &[&str]) -> anyhow::Result<String> {
    let mut out = Vec::new();
    let mut full = vec!["qkdopt"];
    full.extend_from_slice(args);
    run_from(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qkdopt"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn save_model(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("model.qmlp");
    MlpModel::new(&DEFAULT_DIMS, 21).save(&path).unwrap();
    path
}

#[test]
fn gen_data_single_row_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let args = [
            "gen-data",
            "--samples",
            "1",
            "--distances",
            "20",
            "--seed",
            "7",
            "--quiet",
            "--out",
            s(out),
        ];
        run(&args).unwrap();
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let set = TrainingSet::load(&a).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.rows[0].features[0], 0.2);
    assert!(dir.path().join("a.meta").exists());
}

#[test]
fn training_on_one_row_fails_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("one.csv");
    let model = dir.path().join("m.qmlp");
    run(&[
        "gen-data",
        "--samples",
        "1",
        "--distances",
        "20",
        "--quiet",
        "--out",
        s(&data),
    ])
    .unwrap();
    let output = bin()
        .args(["train", "--quiet", "--data", s(&data), "--out", s(&model)])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("at least 100"), "{stderr}");
    assert!(!model.exists());
}

#[test]
fn invalid_ranges_file_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let ranges = dir.path().join("ranges.toml");
    fs::write(&ranges, "e_d = [0.03, 0.01]\n").unwrap();
    let output = bin()
        .args([
            "gen-data",
            "--samples",
            "1",
            "--distances",
            "20",
            "--ranges-file",
            s(&ranges),
        ])
        .args(["--out", s(&dir.path().join("x.csv"))])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("e_d"));

    fs::write(&ranges, "bogus = 1\n").unwrap();
    let output = bin()
        .args(["gen-data", "--distances", "20", "--ranges-file", s(&ranges)])
        .args(["--out", s(&dir.path().join("x.csv"))])
        .output()
        .unwrap();
    assert!(!output.status.success());
}

#[test]
fn missing_files_exit_nonzero() {
    let output = bin()
        .args(["predict", "--model", "/nonexistent/model.qmlp"])
        .args([
            "--l-bc",
            "20",
            "--y0",
            "1e-7",
            "--e-d",
            "0.01",
            "--n-signals",
            "1e13",
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("model"));
    let output = bin()
        .args(["query-lut", "--lut", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!output.status.success());
}

#[test]
fn predict_prints_parameters_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    let model = save_model(dir.path());
    let out = run(&[
        "predict",
        "--model",
        s(&model),
        "--l-bc",
        "20",
        "--y0",
        "1.28e-7",
        "--e-d",
        "0.0123",
        "--n-signals",
        "1.29e13",
        "--compare-cd",
    ])
    .unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("rate_cd"));
    assert_eq!(lines[1].split_whitespace().count(), 14);

    let rows = dir.path().join("rows.txt");
    fs::write(
        &rows,
        "l_bc,y0,e_d,n_signals\n20,1.28e-7,0.0123,1.29e13\n150,1e-6,0.02,1e12\n",
    )
    .unwrap();
    let out = run(&["predict", "--model", s(&model), "--input-file", s(&rows)]).unwrap();
    assert_eq!(out.lines().count(), 3);
    assert!(out.lines().nth(1).unwrap().starts_with("2.0000e1 "));
}

#[test]
fn constants_file_changes_the_rate() {
    let dir = tempfile::tempdir().unwrap();
    let constants = dir.path().join("c.toml");
    fs::write(&constants, "alpha_db_km = 0.3\n").unwrap();
    let args = [
        "trace",
        "--from",
        "30",
        "--points",
        "1",
        "--y0",
        "1e-7",
        "--e-d",
        "0.01",
        "--n-signals",
        "1e13",
    ];
    let base = run(&args).unwrap();
    let mut with = args.to_vec();
    with.extend_from_slice(&["--constants-file", s(&constants)]);
    assert_ne!(run(&with).unwrap(), base);
}

#[test]
fn lut_query_at_a_node_matches_predict() {
    let dir = tempfile::tempdir().unwrap();
    let model = save_model(dir.path());
    let lut = dir.path().join("lut");
    run(&[
        "build-lut",
        "--model",
        s(&model),
        "--out",
        s(&lut),
        "--points",
        "3",
        "--shards",
        "3",
    ])
    .unwrap();
    let grid = GridSpec::from_ranges(&SampleRanges::default(), 3);
    let e = denormalize(
        &grid.node_features([1, 2, 0, 1]),
        &DeviceConstants::default(),
    );
    let cond = [
        format!("{:e}", e.l_bc),
        format!("{:e}", e.y0),
        format!("{:e}", e.e_d),
        format!("{:e}", e.n_signals),
    ];
    let flags = ["--l-bc", "--y0", "--e-d", "--n-signals"];
    let mut q = vec!["query-lut".to_string(), "--lut".into(), s(&lut).into()];
    let mut p = vec!["predict".to_string(), "--model".into(), s(&model).into()];
    for (f, v) in flags.iter().zip(&cond) {
        q.extend([f.to_string(), v.clone()]);
        p.extend([f.to_string(), v.clone()]);
    }
    let q: Vec<&str> = q.iter().map(String::as_str).collect();
    let p: Vec<&str> = p.iter().map(String::as_str).collect();
    let lut_line = run(&q).unwrap();
    let predict_line = run(&p).unwrap();
    let lut_params: Vec<&str> = lut_line
        .lines()
        .nth(1)
        .unwrap()
        .split_whitespace()
        .take(6)
        .collect();
    let nn_params: Vec<&str> = predict_line
        .lines()
        .nth(1)
        .unwrap()
        .split_whitespace()
        .skip(4)
        .take(6)
        .collect();
    assert_eq!(lut_params, nn_params);
    assert!(lut_line.contains("inside"));
}

#[test]
fn trace_is_deterministic_and_flags_the_cutoff() {
    let dir = tempfile::tempdir().unwrap();
    let model = save_model(dir.path());
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        run(&[
            "trace",
            "--y0",
            "6.16e-7",
            "--e-d",
            "0.0135",
            "--n-signals",
            "2.52e12",
            "--points",
            "6",
            "--nn",
            s(&model),
            "--out",
            s(out),
        ])
        .unwrap();
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0].split(',').count(), 16);
    assert!(lines[1].ends_with(",0"));
    assert!(lines[6].ends_with(",1"));

    let single = run(&[
        "trace",
        "--y0",
        "6.16e-7",
        "--e-d",
        "0.0135",
        "--n-signals",
        "2.52e12",
        "--points",
        "1",
    ])
    .unwrap();
    assert_eq!(single.lines().count(), 2);
}

#[test]
fn bench_reports_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let model = save_model(dir.path());
    let lut = dir.path().join("lut");
    run(&[
        "build-lut",
        "--model",
        s(&model),
        "--out",
        s(&lut),
        "--points",
        "3",
    ])
    .unwrap();
    let report = dir.path().join("bench.txt");
    let out = run(&[
        "bench",
        "--trials",
        "1",
        "--model",
        s(&model),
        "--lut",
        s(&lut),
        "--machine",
        "test box",
        "--out",
        s(&report),
    ])
    .unwrap();
    assert_eq!(fs::read_to_string(&report).unwrap(), out);
    assert!(out.contains("machine = test box"));
    for method in ["cd-search", "nn-inference", "lut-query"] {
        assert!(out.contains(&format!("{method}.samples = 1")), "{out}");
    }
}
