//! Integration tests of the runner surfaces: CSV schema and determinism,
//! resolved-config artifacts, problem serialization through the generate
//! command, flow diagnostics, and the binary's exit codes.

use std::path::Path;
use std::process::Command;

use bgs_cli::config::ExperimentConfig;
use bgs_cli::runner::{cmd_check, cmd_flow, cmd_generate, run_experiment, ProbeStatus, CSV_HEADER};
use bgs_core::solver::StopReason;

const SMALL_QUADRATIC: &str = "\
[problem]
family = quadratic
dim_x = 8
dim_y = 6
null_dim = 2
cond = 5
lambda_max = 0.9

[solver]
outer_iters = 3000
unroll_steps = 2
warm_start_steps = 0
outer_step = 1.0
inner_step = 0.5
correction = true
ls_mode = cg_z
ls_iters = 20
tol_upper = 1e-9
tol_lower = 1e-9

[run]
init = gaussian
seeds = 3
out = smoke
";

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn run_writes_frozen_schema_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(SMALL_QUADRATIC).unwrap();
    let outcomes = run_experiment(&cfg, dir.path(), dir.path(), true).unwrap();
    assert_eq!(outcomes.len(), 1);
    assert_eq!(outcomes[0].stop, StopReason::ToleranceReached);

    let lines = read_lines(&outcomes[0].csv_path);
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(
        CSV_HEADER,
        "iter,elapsed_s,upper_grad_norm,lower_grad_norm,dist_xstar_af,bgs_residual"
    );
    let mut prev_iter = 0usize;
    let mut prev_elapsed = 0.0f64;
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 6);
        let iter: usize = cells[0].parse().unwrap();
        assert!(iter > prev_iter, "iterations must increase strictly");
        prev_iter = iter;
        let elapsed: f64 = cells[1].parse().unwrap();
        assert!(elapsed >= prev_elapsed, "elapsed must be non-decreasing");
        prev_elapsed = elapsed;
        for cell in &cells[2..] {
            // Optional columns may be empty; everything else is numeric.
            if !cell.is_empty() {
                cell.parse::<f64>().unwrap();
            }
        }
    }

    // The resolved config sits beside the CSV and reparses to itself.
    let resolved_path = dir.path().join("smoke_seed3.resolved.cfg");
    let text = std::fs::read_to_string(&resolved_path).unwrap();
    let resolved = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(resolved, cfg.resolved_for_seed(3));
    assert_eq!(resolved.problem.seed, Some(3));
}

#[test]
fn optional_columns_empty_without_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_QUADRATIC.replace("out = smoke", "out = nocf\nclosed_form_metrics = false");
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let outcomes = run_experiment(&cfg, dir.path(), dir.path(), true).unwrap();
    let lines = read_lines(&outcomes[0].csv_path);
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[4], "");
    assert_eq!(cells[5], "");
}

#[test]
fn reruns_are_identical_except_elapsed() {
    let cfg = ExperimentConfig::parse(SMALL_QUADRATIC).unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_experiment(&cfg, dir_a.path(), dir_a.path(), true).unwrap();
    let b = run_experiment(&cfg, dir_b.path(), dir_b.path(), true).unwrap();
    let la = read_lines(&a[0].csv_path);
    let lb = read_lines(&b[0].csv_path);
    assert_eq!(la.len(), lb.len());
    for (ra, rb) in la.iter().zip(&lb).skip(1) {
        let ca: Vec<&str> = ra.split(',').collect();
        let cb: Vec<&str> = rb.split(',').collect();
        for k in [0usize, 2, 3, 4, 5] {
            assert_eq!(ca[k], cb[k], "column {k} differs");
        }
    }
}

#[test]
fn generate_then_load_reproduces_dynamics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(SMALL_QUADRATIC).unwrap();
    let problem_path = cmd_generate(&cfg, dir.path(), dir.path(), true).unwrap();

    let direct = run_experiment(&cfg, dir.path(), dir.path(), true).unwrap();

    let loaded_text = SMALL_QUADRATIC.replace(
        "lambda_max = 0.9",
        &format!("lambda_max = 0.9\npath = {}", problem_path.display()),
    );
    let loaded_cfg = ExperimentConfig::parse(&loaded_text).unwrap();
    let out = tempfile::tempdir().unwrap();
    let via_file = run_experiment(&loaded_cfg, out.path(), Path::new("/"), true).unwrap();

    // Solver dynamics are bit-identical; the closed-form metric columns are
    // recomputed from a freshly decomposed spectrum and may differ in the
    // last bits.
    let la = read_lines(&direct[0].csv_path);
    let lb = read_lines(&via_file[0].csv_path);
    assert_eq!(la.len(), lb.len());
    for (ra, rb) in la.iter().zip(&lb).skip(1) {
        let ca: Vec<&str> = ra.split(',').collect();
        let cb: Vec<&str> = rb.split(',').collect();
        assert_eq!(ca[2], cb[2], "upper gradient column must be bit-identical");
        assert_eq!(ca[3], cb[3], "lower gradient column must be bit-identical");
        let da: f64 = ca[4].parse().unwrap();
        let db: f64 = cb[4].parse().unwrap();
        assert!((da - db).abs() <= 1e-9 * (1.0 + da.abs()));
    }
}

#[test]
fn richardson_reproduction_parameters_converge() {
    // The benchmark's original inner-solver choice: Richardson updates on
    // the correction with step 0.9, unit outer step, lower step 0.9.
    let text = "\
[problem]
family = quadratic
dim_x = 200
dim_y = 100
null_dim = 10
cond = 10
lambda_max = 0.99

[solver]
outer_iters = 5000
unroll_steps = 5
warm_start_steps = 0
outer_step = 1.0
inner_step = 0.9
correction = true
ls_mode = richardson_xi
ls_iters = 20
ls_step = 0.9
tol_upper = 1e-9
tol_lower = 1e-9

[run]
init = gaussian
seeds = 0
out = richardson
";
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(text).unwrap();
    let outcomes = run_experiment(&cfg, dir.path(), dir.path(), true).unwrap();
    assert_eq!(outcomes[0].stop, StopReason::ToleranceReached);
    let lines = read_lines(&outcomes[0].csv_path);
    let last: Vec<&str> = lines.last().unwrap().split(',').collect();
    let dist: f64 = last[4].parse().unwrap();
    assert!(dist <= 1e-8, "final distance {dist:.3e}");
}

#[test]
fn check_command_passes_on_both_families() {
    let cfg = ExperimentConfig::parse(SMALL_QUADRATIC).unwrap();
    let report = cmd_check(&cfg, Path::new("."), true).unwrap();
    assert!(report.passed());

    let hat_text = "\
[problem]
family = mexican_hat

[solver]
unroll_steps = 1
outer_step = 0.05
inner_step = 0.05

[run]
init = gaussian
seeds = 5
";
    let cfg = ExperimentConfig::parse(hat_text).unwrap();
    let report = cmd_check(&cfg, Path::new("."), true).unwrap();
    assert!(report.passed());
}

#[test]
fn flow_report_quadratic_all_probes_pass() {
    let cfg = ExperimentConfig::parse(SMALL_QUADRATIC).unwrap();
    let report = cmd_flow(&cfg, Path::new("."), true).unwrap();
    assert!(report.passed(), "{}", report.render());
    for name in [
        "flow_convergence",
        "rate_fit",
        "implicit_jacobian_consistency",
        "sensitivity_vs_flow_fd",
        "lojasiewicz",
        "range_condition",
        "range_negative_control",
    ] {
        let probe = report
            .probe(name)
            .unwrap_or_else(|| panic!("missing probe {name}"));
        assert_eq!(probe.status, ProbeStatus::Pass, "{name}: {}", probe.detail);
    }
}

#[test]
fn flow_report_hat_passes_and_saddle_is_diagnosed() {
    let hat_text = "\
[problem]
family = mexican_hat

[solver]
unroll_steps = 1
outer_step = 0.05
inner_step = 0.05

[run]
init = gaussian
seeds = 6
";
    let cfg = ExperimentConfig::parse(hat_text).unwrap();
    let report = cmd_flow(&cfg, Path::new("."), true).unwrap();
    assert_eq!(
        report
            .probe("implicit_jacobian_consistency")
            .unwrap()
            .status,
        ProbeStatus::Pass,
        "{}",
        report.render()
    );
    assert_eq!(
        report.probe("range_negative_control").unwrap().status,
        ProbeStatus::Pass
    );

    // Saddle initialization: zeros puts the lower variable exactly at the
    // unstable central critical point; the flow stops immediately and the
    // sensitivity system diverges under x-perturbation.
    let saddle_text = hat_text.replace("init = gaussian", "init = zeros");
    let cfg = ExperimentConfig::parse(&saddle_text).unwrap();
    let report = cmd_flow(&cfg, Path::new("."), true).unwrap();
    assert!(!report.passed());
    let flow_probe = report.probe("flow_convergence").unwrap();
    assert_eq!(flow_probe.status, ProbeStatus::Pass);
    assert!(
        flow_probe.detail.contains("steps=0"),
        "{}",
        flow_probe.detail
    );
    let sens = report.probe("sensitivity_vs_flow_fd").unwrap();
    assert_eq!(sens.status, ProbeStatus::Fail);
    assert!(
        sens.detail.contains("sensitivity integration diverged"),
        "detail: {}",
        sens.detail
    );
}

// ── binary end-to-end ───────────────────────────────────────────────

fn bgs_binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bgs"))
}

#[test]
fn binary_run_succeeds_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, SMALL_QUADRATIC).unwrap();
    let out = bgs_binary()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("stop=tolerance"), "stdout: {stdout}");
    assert!(dir.path().join("smoke_seed3.csv").exists());
    assert!(dir.path().join("smoke_seed3.resolved.cfg").exists());
}

#[test]
fn binary_seed_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, SMALL_QUADRATIC).unwrap();
    let out = bgs_binary()
        .args(["run", "--quiet", "--seed", "11", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("smoke_seed11.csv").exists());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown key: validation failure, exit 1, message names key and line.
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[problem]\nfamily = quadratic\nwibble = 1\n").unwrap();
    let out = bgs_binary()
        .args(["run", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("wibble") && stderr.contains("line 3"),
        "{stderr}"
    );

    // Zero progress budget: validation failure citing the constraint.
    let zero = dir.path().join("zero.cfg");
    std::fs::write(
        &zero,
        "[problem]\nfamily = quadratic\n\n[solver]\nunroll_steps = 0\nwarm_start_steps = 0\n",
    )
    .unwrap();
    let out = bgs_binary()
        .args(["run", "--config"])
        .arg(&zero)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("T + M > 0"));

    // Missing config file: I/O failure, exit 3.
    let out = bgs_binary()
        .args(["run", "--config", "/nonexistent/x.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Saddle-start flow diagnostics: numerical findings, exit 2.
    let saddle = dir.path().join("saddle.cfg");
    std::fs::write(
        &saddle,
        "[problem]\nfamily = mexican_hat\n\n[solver]\nunroll_steps = 1\ninner_step = 0.05\n\n[run]\ninit = zeros\n",
    )
    .unwrap();
    let out = bgs_binary()
        .args(["flow", "--quiet", "--config"])
        .arg(&saddle)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_generate_and_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, SMALL_QUADRATIC).unwrap();
    let out = bgs_binary()
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let problem_path = dir.path().join("smoke_problem.txt");
    assert!(problem_path.exists());
    let text = std::fs::read_to_string(&problem_path).unwrap();
    assert!(text.starts_with("format bgs-problem 1"));

    let out = bgs_binary()
        .args(["check", "--quiet", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
