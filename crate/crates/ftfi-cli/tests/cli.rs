//! End-to-end tests of the `ftfi` binary: file round-trips, exit codes,
//! closed-form values, and byte-level determinism of simulation reports.

use ftfi_core::model::{
    save_model, save_policy, FiniteChannelSpec, InitialData, InputPolicy, MemoryOrders, ModelFile,
    PolicyMode, DEFAULT_CAP,
};
use std::path::{Path, PathBuf};
use std::process::Output;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ftfi")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    std::process::Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json_file(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("file exists")).expect("valid JSON")
}

fn bsc(horizon: usize, flip: f64, kappa: Option<f64>) -> FiniteChannelSpec {
    FiniteChannelSpec::from_fn(
        horizon,
        2,
        2,
        MemoryOrders { m: 0, l: 0, n: 0, k: 0 },
        true,
        |_, _, a, b| if a == b { 1.0 - flip } else { flip },
        |_, a, _| a as f64,
        kappa,
        InitialData { b_hist: vec![], a_hist: vec![] },
    )
    .unwrap()
}

fn write_model(dir: &Path, name: &str, model: &ModelFile) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, save_model(model)).unwrap();
    path
}

/// Memoryless additive-noise model with one input and one output dimension,
/// written through the public JSON schema.
fn awgn_json(kappa: f64, sigma2: f64) -> String {
    format!(
        concat!(
            "{{\"type\":\"gaussian\",\"horizon\":1,\"p\":1,\"q\":1,",
            "\"orders\":{{\"M\":0,\"L\":0}},",
            "\"C\":[[[]]],\"D\":[[[1.0]]],\"KV\":[[[{sigma2}]]],",
            "\"R\":[[[1.0]]],\"Q\":[[[0.0]]],",
            "\"kappa\":{kappa},\"initial\":{{\"b_hist\":[]}}}}"
        ),
        sigma2 = sigma2,
        kappa = kappa,
    )
}

fn h2_nats(x: f64) -> f64 {
    -x * x.ln() - (1.0 - x) * (1.0 - x).ln()
}

#[test]
fn solve_reports_the_bsc_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path(), "bsc.json", &ModelFile::Finite(bsc(1, 0.1, None)));
    let out = run(dir.path(), &["solve", "--model", "bsc.json", "--mode", "restricted"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let result = json_file(&dir.path().join("result.json"));
    let per_step = result["value_per_step_nats"].as_f64().unwrap();
    let expected = std::f64::consts::LN_2 - h2_nats(0.1);
    assert!((per_step - expected).abs() < 1e-6, "{per_step} vs {expected}");
    assert_eq!(result["kind"], "finite");
    assert_eq!(result["manifest"]["settings"]["mode"], "restricted");

    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,value_nats,cost,lambda,gap\n"));
    assert!(trace.lines().count() >= 2, "trace has at least one iteration row");

    // The emitted policy file must parse back and carry the manifest.
    let policy_json = json_file(&dir.path().join("policy.json"));
    assert!(policy_json["manifest"]["model_sha256"].is_string());
    let policy = ftfi_core::model::parse_policy(
        &std::fs::read_to_string(dir.path().join("policy.json")).unwrap(),
    )
    .expect("policy round-trips");
    assert_eq!(policy.horizon, 1);
}

#[test]
fn solve_reports_the_awgn_closed_form_in_nats_and_bits() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("awgn.json"), awgn_json(1.0, 1.0)).unwrap();
    let out = run(dir.path(), &["solve", "--model", "awgn.json"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let result = json_file(&dir.path().join("result.json"));
    let value = result["result"]["value_nats"].as_f64().unwrap();
    let expected = 0.5 * (1.0 + 1.0f64).ln();
    assert!((value - expected).abs() < 1e-6, "{value} vs {expected}");
    assert_eq!(result["kind"], "gaussian");

    // Strategy file parses back.
    let text = std::fs::read_to_string(dir.path().join("strategy.json")).unwrap();
    let strategy = ftfi_core::model::parse_strategy(&text).expect("strategy round-trips");
    assert_eq!(strategy.horizon, 1);

    // --bits only changes the printed numbers, never the files.
    let out_bits = run(dir.path(), &["solve", "--model", "awgn.json", "--bits"]);
    assert_eq!(code(&out_bits), 0);
    let shown = stdout(&out_bits);
    assert!(shown.contains("bits"), "stdout: {shown}");
    let nats_file = json_file(&dir.path().join("result.json"));
    let again = nats_file["result"]["value_nats"].as_f64().unwrap();
    assert!((again - expected).abs() < 1e-6, "files stay in nats");
}

#[test]
fn missing_model_file_names_the_path_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["solve", "--model", "no_such_model.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no_such_model.json"), "stderr: {}", stderr(&out));

    let none = run(dir.path(), &["solve"]);
    assert_eq!(code(&none), 1);
    assert!(stderr(&none).contains("--model"));
}

#[test]
fn mode_flag_is_rejected_for_gaussian_models() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("awgn.json"), awgn_json(1.0, 1.0)).unwrap();
    let out = run(dir.path(), &["solve", "--model", "awgn.json", "--mode", "full"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("finite models"), "stderr: {}", stderr(&out));
}

#[test]
fn simulate_is_deterministic_and_consistent_with_the_solver() {
    let dir = tempfile::tempdir().unwrap();
    let spec = bsc(3, 0.1, None);
    write_model(dir.path(), "bsc.json", &ModelFile::Finite(spec.clone()));
    let policy = InputPolicy::uniform(&spec, PolicyMode::Restricted(0), DEFAULT_CAP).unwrap();
    std::fs::write(dir.path().join("policy.json"), save_policy(&policy)).unwrap();

    let args = [
        "simulate",
        "--model",
        "bsc.json",
        "--policy",
        "policy.json",
        "--samples",
        "30000",
        "--seed",
        "11",
    ];
    let first = run(dir.path(), &[&args[..], &["--out-dir", "s1", "--threads", "1"]].concat());
    assert_eq!(code(&first), 0, "stderr: {}", stderr(&first));
    let second = run(dir.path(), &[&args[..], &["--out-dir", "s2", "--threads", "4"]].concat());
    assert_eq!(code(&second), 0);
    let b1 = std::fs::read(dir.path().join("s1/sim.json")).unwrap();
    let b2 = std::fs::read(dir.path().join("s2/sim.json")).unwrap();
    assert_eq!(b1, b2, "reports must be byte-identical regardless of worker count");

    let report = &json_file(&dir.path().join("s1/sim.json"))["report"];
    let mean = report["di_density_mean"].as_f64().unwrap();
    let var = report["di_density_var"].as_f64().unwrap();
    let n = report["samples"].as_f64().unwrap();
    let exact = 3.0 * (std::f64::consts::LN_2 - h2_nats(0.1));
    let se = (var / n).sqrt();
    assert!((mean - exact).abs() < 4.0 * se, "mean {mean} vs exact {exact}, se {se}");

    let zero = run(
        dir.path(),
        &["simulate", "--model", "bsc.json", "--policy", "policy.json", "--samples", "0"],
    );
    assert_eq!(code(&zero), 1);
}

#[test]
fn oracle_passes_and_reports_perturbation_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FiniteChannelSpec::from_fn(
        2,
        2,
        2,
        MemoryOrders { m: 1, l: 1, n: 0, k: 0 },
        false,
        |s, bh, ah, b| {
            let x = 0.15 + 0.07 * bh as f64 + 0.11 * ah as f64 + 0.02 * s as f64;
            if b == 0 {
                x
            } else {
                1.0 - x
            }
        },
        |_, a, _| a as f64,
        None,
        InitialData { b_hist: vec![0], a_hist: vec![1] },
    )
    .unwrap();
    write_model(dir.path(), "memory.json", &ModelFile::Finite(spec));

    let clean = run(dir.path(), &["oracle", "--model", "memory.json", "--out-dir", "clean"]);
    assert_eq!(code(&clean), 0, "stderr: {}", stderr(&clean));
    let report = json_file(&dir.path().join("clean/oracle.json"));
    assert_eq!(report["all_pass"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 4);

    let perturbed = run(
        dir.path(),
        &["oracle", "--model", "memory.json", "--perturb", "1e-2", "--out-dir", "pert"],
    );
    assert_eq!(code(&perturbed), 0, "report-only mode keeps exit 0");
    let report = json_file(&dir.path().join("pert/oracle.json"));
    let checks = report["checks"].as_array().unwrap();
    let sensitivity = checks
        .iter()
        .find(|c| c["name"] == "perturbation-sensitivity")
        .expect("sensitivity check present");
    assert!(sensitivity["deviation"].as_f64().unwrap() > 0.0);
}

#[test]
fn gaussian_oracle_runs_the_gain_grid_on_compatible_models() {
    let dir = tempfile::tempdir().unwrap();
    let scalar = concat!(
        "{\"type\":\"gaussian\",\"horizon\":3,\"p\":1,\"q\":1,",
        "\"orders\":{\"M\":1,\"L\":0},",
        "\"C\":[[[0.4]]],\"D\":[[[1.0]]],\"KV\":[[[0.7]]],",
        "\"R\":[[[1.0]]],\"Q\":[[[0.3,0.1],[0.1,0.5]]],",
        "\"initial\":{\"b_hist\":[[0.6]]}}"
    );
    std::fs::write(dir.path().join("scalar.json"), scalar).unwrap();
    let out = run(dir.path(), &["oracle", "--model", "scalar.json"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report = json_file(&dir.path().join("oracle.json"));
    let checks = report["checks"].as_array().unwrap();
    let grid = checks.iter().find(|c| c["name"] == "riccati-vs-grid").unwrap();
    assert_eq!(grid["supported"], true);
    assert_eq!(grid["pass"], true);
}

#[test]
fn enumeration_caps_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path(), "long.json", &ModelFile::Finite(bsc(12, 0.1, None)));
    let out = run(dir.path(), &["oracle", "--model", "long.json", "--cap", "1000"]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("cap"));
}

#[test]
fn exhausted_iteration_budget_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path(), "bsc.json", &ModelFile::Finite(bsc(1, 0.1, None)));
    let out = run(dir.path(), &["solve", "--model", "bsc.json", "--max-iters", "0"]);
    assert_eq!(code(&out), 2, "stdout: {} stderr: {}", stdout(&out), stderr(&out));
}

#[test]
fn validate_prints_a_summary_and_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path(), "bsc.json", &ModelFile::Finite(bsc(2, 0.2, Some(0.4))));
    let out = run(dir.path(), &["validate", "--model", "bsc.json"]);
    assert_eq!(code(&out), 0);
    let shown = stdout(&out);
    assert!(shown.contains("finite model") && shown.contains("horizon 2"), "stdout: {shown}");

    std::fs::write(dir.path().join("broken.json"), "{\"type\": \"finite\"").unwrap();
    let bad = run(dir.path(), &["validate", "--model", "broken.json"]);
    assert_eq!(code(&bad), 1);
}
