use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmgp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cmgp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(str::to_owned).collect()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_defaults_give_806_rows_with_truth() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["--out-dir", s(dir.path()), "simulate"]);
    let lines = data_lines(&dir.path().join("dataset.csv"));
    assert_eq!(lines.len(), 807);
    assert!(lines[0].ends_with(",w,y,f0,f1"));
    assert!(lines[0].starts_with("id,x1,"));
    let text = fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert!(text.starts_with("# cmgp simulate\n# seed: 7\n# config: "));
}

#[test]
fn simulate_is_byte_deterministic_and_respects_n_remove() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"cohort": {"n": 80, "d": 3, "n_treated": 20, "n_remove": 0}}"#);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--config", &cfg, "--seed", "5", "--out-dir", s(&a), "simulate"]);
    ok(&["--config", &cfg, "--seed", "5", "--out-dir", s(&b), "simulate"]);
    let fa = fs::read(a.join("dataset.csv")).unwrap();
    assert_eq!(fa, fs::read(b.join("dataset.csv")).unwrap());
    assert_eq!(data_lines(&a.join("dataset.csv")).len(), 81);
}

#[test]
fn fit_emits_artifacts_with_normal_quantile_intervals_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"cohort": {"n": 24, "d": 2, "n_treated": 8, "n_remove": 4}}"#);
    let sim = dir.path().join("sim");
    ok(&["--config", &cfg, "--out-dir", s(&sim), "simulate"]);
    let input = sim.join("dataset.csv");
    let fit = dir.path().join("fit");
    ok(&["--gamma", "0.95", "--out-dir", s(&fit), "fit", "--input", s(&input), "--predict", s(&input)]);
    for name in ["theta.json", "trace.csv", "predictions.csv", "predictions_extra.csv"] {
        assert!(fit.join(name).exists(), "{name}");
    }
    let preds = data_lines(&fit.join("predictions.csv"));
    assert_eq!(preds[0], "id,t_hat,f0_hat,f1_hat,var_t,lo,hi");
    assert_eq!(preds.len(), 21);
    for line in &preds[1..] {
        let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let width = v[6] - v[5];
        let expect = 2.0 * 1.959_963_984_540_054 * v[4].sqrt();
        assert!((width - expect).abs() <= 1e-9 * (1.0 + expect), "{width} vs {expect}");
        assert!((v[1] - (v[3] - v[2])).abs() <= 1e-12 * (1.0 + v[1].abs()));
    }
    let trace = data_lines(&fit.join("trace.csv"));
    assert_eq!(trace[0], "iter,r_hat,q,grad_norm");
    assert!(trace.len() > 1);

    let replay = dir.path().join("replay");
    ok(&[
        "--gamma",
        "0.95",
        "--out-dir",
        s(&replay),
        "fit",
        "--input",
        s(&input),
        "--theta",
        s(&fit.join("theta.json")),
        "--no-optimize",
    ]);
    assert_eq!(data_lines(&fit.join("predictions.csv")), data_lines(&replay.join("predictions.csv")));

    let pred = dir.path().join("pred");
    ok(&["--gamma", "0.95", "--out-dir", s(&pred), "predict", "--input", s(&input), "--theta", s(&fit.join("theta.json"))]);
    assert_eq!(data_lines(&fit.join("predictions.csv")), data_lines(&pred.join("predictions.csv")));

    let ev = dir.path().join("eval");
    ok(&["--out-dir", s(&ev), "evaluate", "--input", s(&input), "--theta", s(&fit.join("theta.json"))]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["sqrt_pehe"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["n"], 20);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x1,w,y\n0.1,0,1.0\n0.2,1,2.0\n0.3,0,1.5\n0.4,1,2.5\n0.5,2,1.0\n").unwrap();
    let out = cmgp(&["--out-dir", s(dir.path()), "fit", "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 5"));

    let missing = cmgp(&["fit", "--input", s(&dir.path().join("nope.csv"))]);
    assert_eq!(missing.status.code(), Some(2));

    let cfg = write_config(dir.path(), "c.json", r#"{"cohort": {"n": 50}, "extra": true}"#);
    assert_eq!(cmgp(&["--config", &cfg, "--out-dir", s(dir.path()), "simulate"]).status.code(), Some(2));

    let cfg = write_config(dir.path(), "g.json", r#"{"cohort": {"n": 10, "n_treated": 5, "n_remove": 5}}"#);
    assert_eq!(cmgp(&["--config", &cfg, "--out-dir", s(dir.path()), "simulate"]).status.code(), Some(2));

    assert_eq!(cmgp(&["--gamma", "1.5", "coverage"]).status.code(), Some(2));
    assert_eq!(cmgp(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes_and_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g.json", r#"{"n": 25, "d": 3}"#);
    ok(&["--config", &cfg, "--out-dir", s(dir.path()), "gradcheck"]);
    let rows = data_lines(&dir.path().join("gradcheck.csv"));
    assert_eq!(rows[0], "name,analytic,numeric,abs_err,rel_err,ok");
    assert_eq!(rows.len() - 1, 8 + 2 * 3);
    assert!(rows[1..].iter().all(|r| r.ends_with(",true")));
    let corrupt = cmgp(&["--config", &cfg, "--out-dir", s(dir.path()), "gradcheck", "--corrupt-gradient"]);
    assert_eq!(corrupt.status.code(), Some(1));
}

#[test]
fn benchmark_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "b.json",
        r#"{"cohort": {"n": 70, "d": 2, "n_treated": 20, "n_remove": 10}, "adam": {"max_iters": 20}}"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--config", &cfg, "--seed", "3", "--out-dir", s(&a), "benchmark", "--replicates", "2", "--plot-data"]);
    ok(&["--config", &cfg, "--seed", "3", "--out-dir", s(&b), "benchmark", "--replicates", "2"]);
    let records = data_lines(&a.join("records.csv"));
    assert_eq!(records.len(), 1 + 4);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregates"].as_array().unwrap().len(), 2);
    assert_eq!(report["seed"], 3);
    let plot = data_lines(&a.join("plot.csv"));
    assert_eq!(plot[0], "method,truth,estimate,lo,hi");
    assert!(plot.len() > 1);
}

#[test]
fn coverage_command_reports_fraction() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["--out-dir", s(dir.path()), "--gamma", "0.8", "coverage", "--replicates", "3"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let c = report["coverage"]["coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c));
    assert_eq!(report["coverage"]["total"], 150);
}
