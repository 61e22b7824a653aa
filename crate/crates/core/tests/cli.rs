use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde_json::Value;
use tempfile::TempDir;

use qlmm::cli::run_command;
use qlmm::io::{load_csv, read_records_csv, write_long_csv, LongFormatSchema};
use qlmm::model::ClusteredDataset;
use qlmm::sim::{fista_lasso, generate_dataset, Scenario};

fn schema(p: usize, q: usize) -> LongFormatSchema {
    LongFormatSchema {
        cluster: "cluster".into(),
        response: "y".into(),
        fixed: (1..=p).map(|k| format!("x{k}")).collect(),
        random: (1..=q).map(|k| format!("z{k}")).collect(),
    }
}

fn write_data(dir: &Path, q: usize, seed: u64) -> (PathBuf, ClusteredDataset) {
    let sc = Scenario {
        n: 12,
        m: 4,
        p: 20,
        q,
        seed,
        ..Scenario::default()
    };
    let (ds, _) = generate_dataset(&sc).unwrap();
    let path = dir.join(format!("data_q{q}.csv"));
    write_long_csv(&ds, &schema(20, q), std::fs::File::create(&path).unwrap()).unwrap();
    (path, ds)
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["qlmm"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn data_flags(path: &Path, q: usize) -> Vec<String> {
    let s = schema(20, q);
    let mut v = vec!["--data".to_string(), path.to_str().unwrap().to_string(), "--fixed".into(), s.fixed.join(",")];
    if q > 0 {
        v.push("--random".into());
        v.push(s.random.join(","));
    }
    v
}

fn run_with(cmd: &str, data: &[String], extra: &[&str], out: &Path) -> i32 {
    let mut args: Vec<&str> = vec![cmd];
    args.extend(data.iter().map(String::as_str));
    args.extend_from_slice(extra);
    args.extend(["--output", out.to_str().unwrap()]);
    run(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn tmp() -> TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn fit_writes_coefficients_and_provenance() {
    let dir = tmp();
    let (path, _) = write_data(dir.path(), 2, 1);
    let out = dir.path().join("fit.json");
    assert_eq!(run_with("fit", &data_flags(&path, 2), &["--seed", "5"], &out), 0);
    let v = json(&out);
    assert_eq!(v["fit"]["beta"].as_array().unwrap().len(), 20);
    assert_eq!(v["provenance"]["config"]["seed"], 5);
    assert!(v["cv"]["a_star"].is_number());
    assert!(v["fit"]["lambda"].as_f64().unwrap() > 0.0);
}

#[test]
fn q0_fit_at_a0_matches_plain_lasso() {
    let dir = tmp();
    let (path, ds) = write_data(dir.path(), 0, 2);
    let out = dir.path().join("fit.json");
    assert_eq!(run_with("fit", &data_flags(&path, 0), &["--a", "0"], &out), 0);
    let v = json(&out);
    let beta: Vec<f64> = v["fit"]["beta"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).collect();
    let penalty: Vec<f64> = v["fit"]["penalty"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).collect();
    let n = ds.total_obs();
    let mut x = DMatrix::zeros(n, 20);
    let mut y = DVector::zeros(n);
    let mut off = 0;
    for c in ds.clusters() {
        x.view_mut((off, 0), (c.size(), 20)).copy_from(c.x());
        y.rows_mut(off, c.size()).copy_from(c.y());
        off += c.size();
    }
    let reference = fista_lasso(&x, &y, n as f64, &penalty, 2_000_000, 1e-15);
    for (a, b) in beta.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn infer_targets_give_intervals() {
    let dir = tmp();
    let (path, _) = write_data(dir.path(), 2, 3);
    let out = dir.path().join("inf.csv");
    let flags = data_flags(&path, 2);
    let code = run_with("infer", &flags, &["--alpha", "0.05", "--targets", "2,10", "--a", "2", "--format", "csv"], &out);
    assert_eq!(code, 0);
    let rows = read_records_csv(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.j).collect::<Vec<_>>(), vec![2, 10]);
    for r in &rows {
        let half = 1.959963984540054 * r.v_hat.sqrt();
        assert!((r.ci_hi - r.beta_db - half).abs() < 1e-9);
        assert!((r.beta_db - r.ci_lo - half).abs() < 1e-9);
    }

    let out = dir.path().join("inf.json");
    let code = run_with("infer", &flags, &["--targets", "1,2,3,10", "--fdr", "0.1", "--mode", "a0-robust"], &out);
    assert_eq!(code, 0);
    let v = json(&out);
    assert_eq!(v["records"].as_array().unwrap().len(), 4);
    let selected = v["selected"].as_array().unwrap();
    assert!(selected.iter().any(|j| j == 1), "{selected:?}");
    assert_eq!(v["provenance"]["config"]["mode"], "a0-robust");
}

#[test]
fn varcomp_reports_basis_coefficients() {
    let dir = tmp();
    let (path, _) = write_data(dir.path(), 2, 4);
    let out = dir.path().join("vc.json");
    let code = run_with("varcomp", &data_flags(&path, 2), &["--basis", "identity", "--a", "1"], &out);
    assert_eq!(code, 0);
    let v = json(&out);
    assert_eq!(v["fit"]["eta_hat"].as_array().unwrap().len(), 1);
    assert!(v["fit"]["sigma2_e_hat"].as_f64().unwrap() >= 0.0);

    let out = dir.path().join("vc.csv");
    let code = run_with("varcomp", &data_flags(&path, 2), &["--format", "csv", "--split", "full-sample"], &out);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("parameter,value\nsigma2_e,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn intercept_and_wide_matrix_inputs() {
    let dir = tmp();
    let (path, ds) = write_data(dir.path(), 2, 5);
    let out = dir.path().join("icpt.csv");
    let code = run_with("fit", &data_flags(&path, 2), &["--intercept", "--a", "2", "--format", "csv"], &out);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("0,(intercept),"));
    assert_eq!(text.lines().count(), 22);

    // same fixed effects supplied as a separate row-aligned matrix
    let s = schema(20, 2);
    let long = dir.path().join("long.csv");
    let wide = dir.path().join("wide.csv");
    let mut lw = csv::Writer::from_path(&long).unwrap();
    let mut ww = csv::Writer::from_path(&wide).unwrap();
    lw.write_record(["cluster", "y", "z1", "z2"]).unwrap();
    ww.write_record(&s.fixed).unwrap();
    for c in ds.clusters() {
        for r in 0..c.size() {
            lw.write_record([c.id().to_string(), format!("{:e}", c.y()[r]), format!("{:e}", c.z()[(r, 0)]), format!("{:e}", c.z()[(r, 1)])])
                .unwrap();
            ww.write_record(c.x().row(r).iter().map(|v| format!("{v:e}"))).unwrap();
        }
    }
    lw.flush().unwrap();
    ww.flush().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    assert_eq!(run_with("fit", &data_flags(&path, 2), &["--a", "2"], &a), 0);
    let wide_flags: Vec<String> = [
        "--data", long.to_str().unwrap(), "--random", "z1,z2", "--fixed-matrix", wide.to_str().unwrap(), "--a", "2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    assert_eq!(run_with("fit", &wide_flags, &[], &b), 0);
    assert_eq!(json(&a)["fit"]["beta"], json(&b)["fit"]["beta"]);
}

#[test]
fn exit_codes() {
    let dir = tmp();
    let (path, _) = write_data(dir.path(), 2, 6);
    let out = dir.path().join("x.json");
    assert_eq!(run(&["fit", "--bogus-flag"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run_with("infer", &data_flags(&path, 2), &["--alpha", "1.5"], &out), 2);
    assert_eq!(run_with("infer", &data_flags(&path, 2), &["--targets", "0"], &out), 2);
    // no data given
    assert_eq!(run(&["fit", "--output", out.to_str().unwrap()]), 1);
    let missing = dir.path().join("nope.csv");
    assert_eq!(run_with("fit", &data_flags(&missing, 2), &[], &out), 1);
    // target beyond p is a runtime failure of this dataset
    assert_eq!(run_with("infer", &data_flags(&path, 2), &["--targets", "21"], &out), 1);
}

#[test]
fn simulate_writes_csv_summary() {
    let dir = tmp();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"scenarios": [{"n": 8, "m": 4, "p": 30, "q": 2, "rho": 0.0, "psi": "singular",
            "sigma2_e": 0.25, "beta_true": [1.0, 0.5], "seed": 0}], "reps": 4, "a": 2.0}"#,
    )
    .unwrap();
    let out = dir.path().join("sim.csv");
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap(), "--format", "csv", "-o", out.to_str().unwrap()]), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("n,m,p,q,rho,psi,reps"));
    assert!(lines.next().unwrap().starts_with("8,4,30,2,"));
}

#[test]
fn long_csv_round_trip_is_exact() {
    let dir = tmp();
    let (path, ds) = write_data(dir.path(), 2, 7);
    let back = load_csv(&path, &schema(20, 2)).unwrap();
    assert_eq!(back, ds);
}
