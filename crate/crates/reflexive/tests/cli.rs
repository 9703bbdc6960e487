use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use reflexive::cli::main_with_args;
use reflexive::core::{generate_dataset, PathParams};
use reflexive::io::CSV_HEADER;
use serde_json::Value;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["reflexive"];
    full.extend_from_slice(args);
    let code = main_with_args(full, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn json(run: &Run) -> Value {
    serde_json::from_str(&run.stdout).unwrap_or_else(|e| panic!("{e}: {}", run.stdout))
}

fn fig1_params(rho: f64) -> PathParams {
    let l = DVector::from_vec(vec![4.0 / 3.0, 0.98, 0.75]);
    PathParams::marginal(l.clone(), l, DMatrix::identity(3, 3), DMatrix::identity(3, 3), rho).unwrap()
}

fn write_data(dir: &TempDir, n: usize, seed: u64) -> PathBuf {
    let data = generate_dataset(&fig1_params(0.5), n, seed).unwrap();
    let text: String = data
        .rows()
        .row_iter()
        .map(|row| row.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    let path = dir.path().join("data.csv");
    fs::write(&path, text).unwrap();
    path
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn params_json(loading: &str, cov: f64) -> String {
    format!(
        r#"{{"beta_x_xi": {loading}, "beta_y_eta": {loading},
            "sigma_x_given_xi": [[1,0,0],[0,1,0],[0,0,1]],
            "sigma_y_given_eta": [1,0,0,0,1,0,0,0,1],
            "var_xi": 1, "var_eta": 1, "cov_xi_eta": {cov},
            "constraint_mode": "marginal"}}"#
    )
}

fn sorted_keys(v: &Value) -> Vec<String> {
    let mut keys: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    keys
}

#[test]
fn fit_rrr_reports_estimate_in_unit_interval() {
    let dir = TempDir::new().unwrap();
    let data = write_data(&dir, 200, 1);
    let r = run(&["fit", s(&data), "--p", "3", "--r", "3", "--method", "rrr"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = json(&r);
    let est = v["estimate_cor_regression"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&est));
    assert_eq!(v["estimator"], "rrr");
}

#[test]
fn fit_sem_reports_both_scales() {
    let dir = TempDir::new().unwrap();
    let data = write_data(&dir, 500, 2);
    let r = run(&["fit", s(&data), "--p", "3", "--r", "3", "--method", "sem", "--seed", "4"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = json(&r);
    assert!(v["rho"].is_f64());
    assert!(v["implied_reg_correlation"].is_f64());
    assert_eq!(v["diagnostics"]["converged"], true);
}

#[test]
fn full_dimension_serr_prints_the_rrr_estimate() {
    let dir = TempDir::new().unwrap();
    let data = write_data(&dir, 150, 3);
    let rrr = json(&run(&["fit", s(&data), "--p", "3", "--r", "3", "--method", "rrr"]));
    let serr = json(&run(&["fit", s(&data), "--p", "3", "--r", "3", "--method", "serr", "--ux", "3", "--uy", "3"]));
    let (a, b) = (
        rrr["estimate_cor_regression"].as_f64().unwrap(),
        serr["estimate_cor_regression"].as_f64().unwrap(),
    );
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let data = write_data(&dir, 100, 4);
    assert_eq!(run(&["fit", s(&data), "--p", "3", "--r", "3"]).code, 0);
    assert_eq!(run(&["fit", s(&data), "--p", "3"]).code, 1);
    assert_eq!(run(&["bogus"]).code, 1);
    assert_eq!(run(&["fit", s(&data), "--p", "2", "--r", "3"]).code, 1);
    assert_eq!(run(&["fit", s(&data), "--p", "3", "--r", "3", "--ux", "4"]).code, 1);
    assert_eq!(run(&["reproduce", "--figure", "5", "--out", "x.csv", "--seed", "1"]).code, 1);
    assert_eq!(run(&["fit", "/nonexistent/data.csv", "--p", "3", "--r", "3"]).code, 2);
    let nonconv = run(&["fit", s(&data), "--p", "3", "--r", "3", "--method", "sem", "--max-iter", "1", "--starts", "1"]);
    assert_eq!(nonconv.code, 3, "{}", nonconv.stdout);
    assert_eq!(json(&nonconv)["diagnostics"]["converged"], false);
}

#[test]
fn malformed_csv_reports_position() {
    let dir = TempDir::new().unwrap();
    let bad = write(&dir, "bad.csv", "1,2,3,4,5,6\n1,2,x,4,5,6\n");
    let r = run(&["fit", s(&bad), "--p", "3", "--r", "3"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("row 2") && r.stderr.contains("column 3"), "{}", r.stderr);
}

#[test]
fn population_reproduces_published_constants() {
    let dir = TempDir::new().unwrap();
    let fig1 = write(&dir, "fig1.json", &params_json("[1.3333333333333333, 0.98, 0.75]", 0.5));
    let r = run(&["population", s(&fig1)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = json(&r);
    let bias = v["bias_factor"].as_f64().unwrap();
    assert!((bias - 0.7675).abs() < 1e-4, "{bias}");
    assert_eq!(format!("{bias:.2}"), "0.77");
    let reg = v["cor_regression"].as_f64().unwrap();
    assert!((reg - 0.384).abs() < 1e-3, "{reg}");
    assert!((v["cor_xi_eta"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(v["identifiability"]["cor_identified"], true);

    let strong = write(&dir, "strong.json", &params_json("[4, 4, 4]", 0.5));
    let v = json(&run(&["population", s(&strong)]));
    assert!((v["bias_factor"].as_f64().unwrap() - 48.0 / 49.0).abs() < 1e-12);

    let null = write(&dir, "null.json", &params_json("[1.3333333333333333, 0.98, 0.75]", 0.0));
    let v = json(&run(&["population", s(&null)]));
    assert_eq!(v["cor_xi_eta"].as_f64().unwrap(), 0.0);
    assert_eq!(v["cor_regression"].as_f64().unwrap(), 0.0);
}

#[test]
fn population_schema_error_lists_missing_fields() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "partial.json", r#"{"beta_x_xi": [1, 1], "var_xi": 1}"#);
    let r = run(&["population", s(&path)]);
    assert_eq!(r.code, 2);
    for field in ["beta_y_eta", "sigma_x_given_xi", "sigma_y_given_eta", "var_eta", "cov_xi_eta", "constraint_mode"] {
        assert!(r.stderr.contains(field), "{field} missing from: {}", r.stderr);
    }
    assert!(!r.stderr.contains("var_xi,") && !r.stderr.contains("beta_x_xi"));
    let r = run(&["population", s(&write(&dir, "broken.json", "{not json"))]);
    assert_eq!(r.code, 2);
}

#[test]
fn reproduce_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let r = run(&["reproduce", "--figure", "1", "--out", s(out), "--seed", "42", "--reps", "2"]);
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    for n in [100, 1000] {
        let fa = fs::read(reflexive::cli::suffixed(&a, n)).unwrap();
        let fb = fs::read(reflexive::cli::suffixed(&b, n)).unwrap();
        assert_eq!(fa, fb);
    }
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    reader.records().map(|r| r.unwrap()).collect()
}

#[test]
fn figure_three_shows_inflated_sem_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("fig3.csv");
    let r = run(&["reproduce", "--figure", "3", "--out", s(&out), "--seed", "42", "--n", "1000", "--reps", "5"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = read_rows(&reflexive::cli::suffixed(&out, 1000));
    let gap = |estimator: &str, target_col: usize| -> f64 {
        let gaps: Vec<f64> = rows
            .iter()
            .filter(|r| &r[1] == estimator && !r[2].is_empty())
            .map(|r| (r[2].parse::<f64>().unwrap() - r[target_col].parse::<f64>().unwrap()).abs())
            .collect();
        gaps.iter().sum::<f64>() / gaps.len() as f64
    };
    let sem = gap("sem", 5);
    let serr = gap("serr", 6);
    assert!(sem > 3.0 * serr, "sem {sem} vs serr {serr}");
}

#[test]
fn simulate_respects_estimator_filter() {
    let dir = TempDir::new().unwrap();
    let config = write(
        &dir,
        "config.json",
        r#"{"loading": [1.3333333333333333, 0.98, 0.75], "error_structure": "identity",
            "rho_grid": [0.2, 0.4], "n": 80, "reps": 3, "estimators": ["rrr"]}"#,
    );
    let out = dir.path().join("sim.csv");
    let r = run(&["simulate", "--config", s(&config), "--out", s(&out), "--seed", "7"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = read_rows(&out);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| &r[1] == "rrr" && !r[5].is_empty() && !r[6].is_empty()));
    assert!(r.stdout.contains("rrr"));
    assert_eq!(run(&["simulate", "--config", s(&config), "--out", s(&out)]).code, 1);
    let unwritable = run(&["simulate", "--config", s(&config), "--out", "/nonexistent/dir/x.csv", "--seed", "7"]);
    assert_eq!(unwritable.code, 2);
}

#[test]
fn output_schemas_are_stable() {
    let dir = TempDir::new().unwrap();
    let data = write_data(&dir, 300, 9);
    let base = ["diagnostics", "estimate_cor_regression", "estimator", "n", "p", "r"];
    let rrr = json(&run(&["fit", s(&data), "--p", "3", "--r", "3"]));
    assert_eq!(sorted_keys(&rrr), base);
    assert_eq!(
        sorted_keys(&rrr["diagnostics"]),
        ["converged", "degenerate", "dims_selected", "iterations", "notes", "tied"]
    );
    let serr = json(&run(&["fit", s(&data), "--p", "3", "--r", "3", "--method", "serr"]));
    assert_eq!(
        sorted_keys(&serr),
        ["diagnostics", "estimate_cor_regression", "estimator", "n", "p", "r", "u_x", "u_y", "weights"]
    );
    assert_eq!(sorted_keys(&serr["weights"]), ["gamma", "method", "phi"]);
    let sem = json(&run(&["fit", s(&data), "--p", "3", "--r", "3", "--method", "sem"]));
    assert_eq!(
        sorted_keys(&sem),
        ["diagnostics", "estimate_cor_regression", "estimator", "implied_reg_correlation", "n", "p", "r", "rho", "sem"]
    );
    let params = write(&dir, "p.json", &params_json("[1, 1, 1]", 0.3));
    let pop = json(&run(&["population", s(&params)]));
    assert_eq!(
        sorted_keys(&pop),
        [
            "bias_factor",
            "constraint_mode",
            "cor_regression",
            "cor_xi_eta",
            "h_eta",
            "h_xi",
            "identifiability",
            "var_reg_eta",
            "var_reg_xi"
        ]
    );
    assert_eq!(CSV_HEADER, ["rho", "estimator", "mean", "sd", "n_fail", "target_marginal", "target_regression"]);
}
