//! End-to-end tests of the command-line interface: each test drives the
//! compiled binary the way an operator would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridfence"))
}

fn repo_scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn small_scenario() -> &'static str {
    r#"
t_samp = 1e-3
seed = 3

[horizons]
secondary_start = 0.2
detector_start = 0.3
end = 1.0

[noise]
measurement = [1e-3, 1e-3]
process = [5e-4, 5e-4]
mismatch_allowance = [2e-4, 2e-4]

[topology]
nodes = [1, 2]

[[topology.lines]]
nodes = [1, 2]
resistance = 1.5

[[ders]]
id = 1
filter_resistance = 0.2
filter_inductance = 1e-3
filter_capacitance = 5e-4
rated_current = 10.0
v_ref = 40.0
load = { impedance = 8.0 }

[[ders]]
id = 2
filter_resistance = 0.2
filter_inductance = 1e-3
filter_capacitance = 5e-4
rated_current = 10.0
v_ref = 40.0
load = { impedance = 12.0 }
"#
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary should launch");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary should launch").status.code().unwrap_or(-1)
}

#[test]
fn run_writes_trace_and_summary_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("pair.toml");
    std::fs::write(&scenario, small_scenario()).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(bin().arg("run").arg(&scenario).arg("--out-dir").arg(&out_a));
    run_ok(bin().arg("run").arg(&scenario).arg("--out-dir").arg(&out_b));

    let trace_a = std::fs::read(out_a.join("pair.trace.csv")).unwrap();
    let trace_b = std::fs::read(out_b.join("pair.trace.csv")).unwrap();
    assert!(!trace_a.is_empty());
    assert_eq!(trace_a, trace_b, "same scenario and seed must be byte-identical");

    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_a.join("pair.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 1000);
    assert_eq!(summary["links_alarmed"], 0);
}

#[test]
fn seed_override_changes_the_noise_draws() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("pair.toml");
    std::fs::write(&scenario, small_scenario()).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(bin().arg("run").arg(&scenario).arg("--out-dir").arg(&out_a));
    run_ok(bin().arg("run").arg(&scenario).arg("--out-dir").arg(&out_b).args(["--seed", "99"]));

    let trace_a = std::fs::read(out_a.join("pair.trace.csv")).unwrap();
    let trace_b = std::fs::read(out_b.join("pair.trace.csv")).unwrap();
    assert_ne!(trace_a, trace_b);
}

#[test]
fn out_dir_env_var_is_honored_when_flag_is_absent() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("pair.toml");
    std::fs::write(&scenario, small_scenario()).unwrap();

    let out = dir.path().join("from-env");
    run_ok(bin().arg("run").arg(&scenario).env("GRIDFENCE_OUT_DIR", &out));
    assert!(out.join("pair.trace.csv").exists());
}

#[test]
fn missing_scenario_file_exits_with_validation_code() {
    assert_eq!(exit_code(bin().arg("run").arg("/nonexistent/nope.toml")), 2);
}

#[test]
fn invalid_scenario_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.toml");
    // Attack on the link's own sender is rejected by validation.
    let text = small_scenario().to_string()
        + "\n[[attacks]]\nreceiver = 1\nsender = 1\nshape = \"step\"\namplitude = 1.0\nstart_time = 0.5\ntarget = \"current\"\n";
    std::fs::write(&scenario, text).unwrap();
    assert_eq!(exit_code(bin().arg("run").arg(&scenario)), 2);
}

#[test]
fn plan_sensors_accepts_bare_graph_files() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("ring.toml");
    std::fs::write(
        &graph,
        r#"
[topology]
nodes = [1, 2, 3, 4]

[[topology.lines]]
nodes = [1, 2]
resistance = 1.5

[[topology.lines]]
nodes = [2, 3]
resistance = 1.5

[[topology.lines]]
nodes = [3, 4]
resistance = 1.5

[[topology.lines]]
nodes = [1, 4]
resistance = 1.5
"#,
    )
    .unwrap();
    let report_path = dir.path().join("ring.sensors.txt");
    let out = run_ok(bin().arg("plan-sensors").arg(&graph).arg("--out").arg(&report_path));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("4 sensors over 4 nodes"), "unexpected output: {text}");

    let report = std::fs::read_to_string(&report_path).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("sensor ")).count(), 4);
}

#[test]
fn plan_sensors_rejects_disconnected_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("split.toml");
    std::fs::write(
        &graph,
        r#"
[topology]
nodes = [1, 2, 3, 4]

[[topology.lines]]
nodes = [1, 2]
resistance = 1.5

[[topology.lines]]
nodes = [3, 4]
resistance = 1.5
"#,
    )
    .unwrap();
    assert_eq!(exit_code(bin().arg("plan-sensors").arg(&graph)), 2);
}

#[test]
fn plan_sensors_reads_full_scenarios_and_matches_the_mesh_pin() {
    let out = run_ok(bin().arg("plan-sensors").arg(repo_scenario("mesh16-partition.toml")));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("26 sensors over 16 nodes"), "unexpected output: {text}");
}

#[test]
fn sweep_eta_emits_a_csv_grid_with_stable_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("eta.csv");
    run_ok(
        bin()
            .arg("sweep-eta")
            .args(["--resistance", "0.1:1.0:4"])
            .args(["--inductance", "1e-3:1e-2:3"])
            .args(["--t-samp", "5e-4,1e-3"])
            .arg("--out")
            .arg(&csv),
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "resistance,inductance,capacitance,t_samp,eta,eta_approx,approx_error");
    assert_eq!(rows.len(), 1 + 4 * 3 * 2);
    for row in &rows[1..] {
        let eta: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!(eta.abs() < 1.0, "unstable grid point: {row}");
    }
}

#[test]
fn verify_uio_passes_bundled_scenarios_and_rejects_corrupted_input() {
    let out = run_ok(bin().arg("verify-uio").arg(repo_scenario("ring4-step-bias.toml")));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("8 links verified"), "unexpected output: {text}");

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "t_samp = \"not a number\"").unwrap();
    assert_eq!(exit_code(bin().arg("verify-uio").arg(&broken)), 2);
}
