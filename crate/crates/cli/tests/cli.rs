//! End-to-end tests of the `nrdf` binary: exit-code contract, file outputs,
//! and the report schema.

use std::path::Path;
use std::process::{Command, Output};

fn nrdf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nrdf"))
}

fn write_problem(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

const SCALAR_PROBLEM: &str = r#"{
    "n": 6, "p1": 1, "p2": 1, "q1": 1, "q2": 1,
    "A": [[0.9, 0.3], [0.3, 0.9]],
    "B": [[1.0, 0.0], [0.0, 1.0]],
    "Q_W": [[1.0, 0.0], [0.0, 1.0]],
    "Q_X1": [[1.0, 0.0], [0.0, 1.0]],
    "delta1": 0.3, "delta2": 0.3
}"#;

const DECOUPLED_PROBLEM: &str = r#"{
    "n": 4, "p1": 1, "p2": 1, "q1": 1, "q2": 1,
    "A": [[0.9, 0.0], [0.0, 0.6]],
    "B": [[1.0, 0.0], [0.0, 1.0]],
    "Q_W": [[1.0, 0.0], [0.0, 1.0]],
    "Q_X1": [[1.0, 0.0], [0.0, 1.0]],
    "delta1": 0.3, "delta2": 0.3
}"#;

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

#[test]
fn solve_interior_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p.json", SCALAR_PROBLEM);
    let report_path = dir.path().join("report.json");
    let csv_path = dir.path().join("stages.csv");

    let out = nrdf()
        .arg("solve")
        .arg(&problem)
        .arg("--output")
        .arg(&report_path)
        .arg("--csv")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("regime: interior"), "stdout: {stdout}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["report"]["regime"], "interior");
    let rate = report["report"]["rate_total"].as_f64().unwrap();
    assert!(rate > 0.0);
    let max_stationarity = report["report"]["residuals"]["stationarity"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .fold(0.0f64, f64::max);
    assert!(max_stationarity <= 1e-6);

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7); // header + 6 stages
    assert!(lines[0].starts_with("stage,rate_nats,rate_bits"));
}

#[test]
fn solve_rejects_invalid_budget() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SCALAR_PROBLEM.replace("\"delta1\": 0.3", "\"delta1\": 0.0");
    let problem = write_problem(dir.path(), "bad.json", &bad);
    let out = nrdf().arg("solve").arg(&problem).output().unwrap();
    assert_eq!(exit_code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("delta1 must be positive"), "stderr: {stderr}");
}

#[test]
fn solve_over_generous_budgets_is_zero_rate() {
    let dir = tempfile::tempdir().unwrap();
    let generous = SCALAR_PROBLEM
        .replace("\"delta1\": 0.3", "\"delta1\": 1000.0")
        .replace("\"delta2\": 0.3", "\"delta2\": 1000.0");
    let problem = write_problem(dir.path(), "generous.json", &generous);
    let report_path = dir.path().join("report.json");
    let out = nrdf()
        .arg("solve")
        .arg(&problem)
        .arg("--output")
        .arg(&report_path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["report"]["regime"], "zero-rate");
    assert_eq!(report["report"]["rate_total"].as_f64().unwrap(), 0.0);
    assert_eq!(report["report"]["multipliers"]["lambda1"].as_f64().unwrap(), 0.0);
}

#[test]
fn solve_boundary_exits_two_and_oracle_fills_in() {
    let dir = tempfile::tempdir().unwrap();
    let lopsided = SCALAR_PROBLEM
        .replace("\"delta1\": 0.3", "\"delta1\": 50.0")
        .replace("\"delta2\": 0.3", "\"delta2\": 0.05");
    let problem = write_problem(dir.path(), "lopsided.json", &lopsided);

    let out = nrdf().arg("solve").arg(&problem).output().unwrap();
    assert_eq!(exit_code(&out), 2);

    let report_path = dir.path().join("report.json");
    let out = nrdf()
        .arg("solve")
        .arg(&problem)
        .arg("--oracle")
        .arg("--output")
        .arg(&report_path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["report"]["regime"], "boundary-detected");
    let oracle_rate = report["oracle"]["rate"].as_f64().unwrap();
    assert!(oracle_rate.is_finite() && oracle_rate > 0.0);
}

#[test]
fn solve_closed_form_matches_generic() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p.json", SCALAR_PROBLEM);
    let generic_path = dir.path().join("generic.json");
    let closed_path = dir.path().join("closed.json");
    assert_eq!(
        exit_code(&nrdf().arg("solve").arg(&problem).arg("--output").arg(&generic_path).output().unwrap()),
        0
    );
    assert_eq!(
        exit_code(
            &nrdf()
                .arg("solve")
                .arg(&problem)
                .arg("--closed-form")
                .arg("--output")
                .arg(&closed_path)
                .output()
                .unwrap()
        ),
        0
    );
    let generic: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&generic_path).unwrap()).unwrap();
    let closed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&closed_path).unwrap()).unwrap();
    let rg = generic["report"]["rate_total"].as_f64().unwrap();
    let rc = closed["report"]["rate_total"].as_f64().unwrap();
    assert!((rg - rc).abs() <= 1e-8, "generic {rg} vs closed form {rc}");
}

#[test]
fn sweep_emits_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p.json", DECOUPLED_PROBLEM);
    let csv_path = dir.path().join("sweep.csv");
    let out = nrdf()
        .arg("sweep")
        .arg(&problem)
        .arg("--delta1-grid")
        .arg("0.2:0.4:2")
        .arg("--delta2-grid")
        .arg("0.2:0.4:2")
        .arg("--csv")
        .arg(&csv_path)
        .arg("--jobs")
        .arg("2")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6); // header + 4 rows + summary
    assert_eq!(
        lines[0],
        "delta1,delta2,rate_nats,rate_bits,regime,d1_achieved,d2_achieved"
    );
    assert_eq!(lines[5], "# monotonicity_violations=0");
    // rates nonincreasing along each axis
    let rate = |line: &str| -> f64 { line.split(',').nth(2).unwrap().parse().unwrap() };
    assert!(rate(lines[1]) >= rate(lines[2]) - 1e-9);
    assert!(rate(lines[1]) >= rate(lines[3]) - 1e-9);
    for line in &lines[1..5] {
        assert!(line.contains("interior"), "row: {line}");
    }
}

#[test]
fn solve_closed_form_boundary_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let lopsided = SCALAR_PROBLEM
        .replace("\"delta1\": 0.3", "\"delta1\": 50.0")
        .replace("\"delta2\": 0.3", "\"delta2\": 0.05");
    let problem = write_problem(dir.path(), "lopsided.json", &lopsided);
    let out = nrdf()
        .arg("solve")
        .arg(&problem)
        .arg("--closed-form")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn sweep_covers_all_regimes_with_oracle() {
    // decoupled model: zero-rate average traces are about (2.07, 1.35), so
    // the 2x2 grid hits interior, two boundary cells (oracle-only), and a
    // fully generous zero-rate cell.
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p.json", DECOUPLED_PROBLEM);
    let csv_path = dir.path().join("sweep.csv");
    let out = nrdf()
        .arg("sweep")
        .arg(&problem)
        .arg("--delta1-grid")
        .arg("0.3:3.0:2")
        .arg("--delta2-grid")
        .arg("0.05:1.5:2")
        .arg("--oracle")
        .arg("--csv")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    let regime = |line: &str| line.split(',').nth(4).unwrap().to_string();
    assert_eq!(regime(lines[1]), "interior");
    assert_eq!(regime(lines[2]), "oracle-only");
    assert_eq!(regime(lines[3]), "oracle-only");
    assert_eq!(regime(lines[4]), "zero-rate");
    let rate = |line: &str| -> f64 { line.split(',').nth(2).unwrap().parse().unwrap() };
    assert_eq!(rate(lines[4]), 0.0);
    assert_eq!(lines[5], "# monotonicity_violations=0");
}

#[test]
fn verify_passes_on_interior_instance() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p.json", DECOUPLED_PROBLEM);
    let out = nrdf()
        .arg("verify")
        .arg(&problem)
        .arg("--paths")
        .arg("20000")
        .arg("--seed")
        .arg("7")
        .output()
        .unwrap();
    assert_eq!(
        exit_code(&out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("all checks passed"));
}

#[test]
fn verify_detects_perturbed_gain() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p.json", DECOUPLED_PROBLEM);
    let out = nrdf()
        .arg("verify")
        .arg(&problem)
        .arg("--paths")
        .arg("20000")
        .arg("--seed")
        .arg("7")
        .arg("--perturb-h")
        .arg("1.2")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"), "stdout: {stdout}");
}

#[test]
fn verify_skip_mc_runs_deterministic_checks_only() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p.json", SCALAR_PROBLEM);
    let report_path = dir.path().join("verify.json");
    let out = nrdf()
        .arg("verify")
        .arg(&problem)
        .arg("--skip-mc")
        .arg("--output")
        .arg(&report_path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let names: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(!names.iter().any(|n| n.starts_with("mc-")));
    assert!(names.contains(&"kkt-residuals"));
    assert_eq!(report["all_passed"], true);
}

#[test]
fn simulate_reports_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p.json", DECOUPLED_PROBLEM);
    let report_path = dir.path().join("sim.json");
    let out = nrdf()
        .arg("simulate")
        .arg(&problem)
        .arg("--paths")
        .arg("20000")
        .arg("--seed")
        .arg("5")
        .arg("--output")
        .arg(&report_path)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"].as_u64().unwrap(), 5);
    let plug = report["plug_in_rate_nats"].as_f64().unwrap();
    let analytic = report["rate_total_nats"].as_f64().unwrap();
    assert!((plug - analytic).abs() / analytic <= 0.05, "plug {plug} vs {analytic}");
}
