//! Command implementations: experiment runs with CSV traces, the
//! finite-difference check, the flow diagnostics report, and problem
//! generation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bgs_core::check::{fd_check, CheckReport};
use bgs_core::flow::{
    flow_jacobian_fd, implicit_jacobian, integrate_gf, integrate_sensitivity, lojasiewicz_probe,
    range_probe, rate_fit, FlowParams,
};
use bgs_core::linalg::seeded_rng;
use bgs_core::problems::{
    format_f64, gaussian_init, problem_from_text, problem_to_text, quadratic_generate,
    MexicanHatProblem, Problem, ProblemMeta, RangeDefectProblem,
};
use bgs_core::solver::{bgs_opt, RunTrace, StopReason};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Frozen trace schema: exactly these six columns, in this order.
pub const CSV_HEADER: &str =
    "iter,elapsed_s,upper_grad_norm,lower_grad_norm,dist_xstar_af,bgs_residual";

/// Outcome of one seeded run.
#[derive(Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub csv_path: PathBuf,
    pub stop: StopReason,
    pub iterations: usize,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.stop, StopReason::Diverged { .. })
    }
}

/// Build the problem a run works on. The effective generation seed is the
/// pinned problem seed when present, the run seed otherwise.
pub fn build_problem(
    cfg: &ExperimentConfig,
    run_seed: u64,
    config_dir: &Path,
) -> Result<(Problem, ProblemMeta), CliError> {
    if let Some(path) = &cfg.problem.path {
        let full = config_dir.join(path);
        let text = fs::read_to_string(&full)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", full.display())))?;
        let (problem, meta) = problem_from_text(&text)?;
        return Ok((problem, meta));
    }
    let seed = cfg.problem.seed.unwrap_or(run_seed);
    match cfg.problem.family.as_str() {
        "quadratic" => {
            let q = quadratic_generate(
                cfg.problem.dim_x,
                cfg.problem.dim_y,
                cfg.problem.null_dim,
                cfg.problem.cond,
                cfg.problem.lambda_max,
                seed,
            )?;
            let meta = ProblemMeta {
                seed: Some(seed),
                cond: Some(cfg.problem.cond),
                null_dim: Some(cfg.problem.null_dim),
                lambda_max: Some(cfg.problem.lambda_max),
            };
            Ok((Problem::Quadratic(q), meta))
        }
        "mexican_hat" => Ok((
            Problem::MexicanHat(MexicanHatProblem::new(cfg.problem.hat_coeff)),
            ProblemMeta {
                seed: Some(seed),
                ..ProblemMeta::default()
            },
        )),
        other => Err(CliError::Config(vec![format!("unknown family `{other}`")])),
    }
}

fn initial_point(cfg: &ExperimentConfig, problem: &Problem, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let oracle = problem.oracle();
    match cfg.run.init.as_str() {
        "gaussian" => gaussian_init(oracle, seed),
        _ => (vec![0.0; oracle.dim_x()], vec![0.0; oracle.dim_y()]),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

/// Write a trace in the frozen CSV schema.
pub fn write_trace_csv(path: &Path, trace: &RunTrace) -> Result<(), CliError> {
    let mut out = String::with_capacity(trace.rows.len() * 96 + 64);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in &trace.rows {
        out.push_str(&format!(
            "{},{:.6e},{},{},{},{}\n",
            row.iter,
            row.elapsed_s,
            format_f64(row.upper_grad_norm),
            format_f64(row.lower_grad_norm),
            opt_cell(row.dist_to_optimum),
            opt_cell(row.bgs_residual),
        ));
    }
    fs::write(path, out).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// Run every seed of the experiment, emitting one CSV and one resolved
/// config per run. Returns the per-seed outcomes; a diverged run still
/// leaves its partial CSV behind.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    config_dir: &Path,
    quiet: bool,
) -> Result<Vec<RunOutcome>, CliError> {
    let core_cfg = cfg.resolve_solver().map_err(CliError::Config)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", out_dir.display())))?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.run.seeds {
        let (problem, _meta) = build_problem(cfg, seed, config_dir)?;
        let oracle = problem.oracle();
        let (x0, y0) = initial_point(cfg, &problem, seed);
        let closed_form = if cfg.run.closed_form_metrics {
            problem.closed_form()
        } else {
            None
        };
        let trace = bgs_opt(oracle, &core_cfg, &x0, &y0, closed_form)?;
        let stem = format!("{}_seed{}", cfg.run.out, seed);
        let csv_path = out_dir.join(format!("{stem}.csv"));
        write_trace_csv(&csv_path, &trace)?;
        let resolved = cfg.resolved_for_seed(seed).to_text();
        let cfg_path = out_dir.join(format!("{stem}.resolved.cfg"));
        fs::write(&cfg_path, resolved)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", cfg_path.display())))?;
        if !quiet {
            for w in &trace.warnings {
                eprintln!("warning: {w}");
            }
            print_summary(seed, &trace, &csv_path);
        }
        outcomes.push(RunOutcome {
            seed,
            csv_path,
            stop: trace.stop.clone(),
            iterations: trace.iterations(),
        });
    }
    Ok(outcomes)
}

fn print_summary(seed: u64, trace: &RunTrace, csv_path: &Path) {
    let reason = match &trace.stop {
        StopReason::ToleranceReached => "tolerance".to_string(),
        StopReason::IterationCap => "iteration-cap".to_string(),
        StopReason::Diverged { iter, message } => format!("diverged@{iter} ({message})"),
    };
    let tail = trace
        .final_row()
        .map(|r| {
            format!(
                "upper_grad={:.3e} lower_grad={:.3e}{}{}",
                r.upper_grad_norm,
                r.lower_grad_norm,
                r.dist_to_optimum
                    .map(|d| format!(" dist={d:.3e}"))
                    .unwrap_or_default(),
                r.bgs_residual
                    .map(|d| format!(" bgs_residual={d:.3e}"))
                    .unwrap_or_default(),
            )
        })
        .unwrap_or_else(|| "no iterations recorded".into());
    let ls = trace
        .ls_residual
        .map(|r| format!(" ls_residual={r:.3e}"))
        .unwrap_or_default();
    println!(
        "seed {seed}: stop={reason} iters={} {tail}{ls} csv={}",
        trace.iterations(),
        csv_path.display()
    );
}

/// Render a derivative-check report; `Err` when any operator exceeds the
/// threshold, naming it.
pub fn cmd_check(
    cfg: &ExperimentConfig,
    config_dir: &Path,
    quiet: bool,
) -> Result<CheckReport, CliError> {
    let seed = cfg.run.seeds.first().copied().unwrap_or(0);
    let (problem, _) = build_problem(cfg, seed, config_dir)?;
    let core_cfg = cfg.resolve_solver().map_err(CliError::Config)?;
    let report = fd_check(
        problem.oracle(),
        &[1, 5, 20],
        core_cfg.inner_step,
        10,
        seed ^ 0x5eed,
        1e-5,
    )?;
    if !quiet {
        for e in &report.entries {
            println!(
                "operator={} max_rel_err={:.3e} threshold={:.1e} worst={} status={}",
                e.operator,
                e.max_rel_err,
                e.threshold,
                e.worst_case,
                if e.passed() { "pass" } else { "FAIL" }
            );
        }
    }
    if report.passed() {
        Ok(report)
    } else {
        let failures: Vec<String> = report
            .failures()
            .map(|e| {
                format!(
                    "{} (worst at {}, rel err {:.3e})",
                    e.operator, e.worst_case, e.max_rel_err
                )
            })
            .collect();
        Err(CliError::Numerical(format!(
            "derivative check failed: {}",
            failures.join("; ")
        )))
    }
}

/// One line of the flow diagnostics report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub name: &'static str,
    pub status: ProbeStatus,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

impl ProbeOutcome {
    fn render(&self) -> String {
        let status = match self.status {
            ProbeStatus::Pass => "pass",
            ProbeStatus::Fail => "FAIL",
            ProbeStatus::Skipped => "skipped",
        };
        let mut line = format!("probe={} status={status}", self.name);
        if let Some(v) = self.value {
            line.push_str(&format!(" value={v:.6e}"));
        }
        if let Some(t) = self.threshold {
            line.push_str(&format!(" threshold={t:.1e}"));
        }
        if !self.detail.is_empty() {
            line.push_str(&format!(" detail=\"{}\"", self.detail));
        }
        line
    }
}

#[derive(Debug, Clone)]
pub struct FlowReport {
    /// What the probes ran on: family, dimensions, initialization.
    pub inputs: String,
    pub probes: Vec<ProbeOutcome>,
}

impl FlowReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.status != ProbeStatus::Fail)
    }

    pub fn probe(&self, name: &str) -> Option<&ProbeOutcome> {
        self.probes.iter().find(|p| p.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = format!("inputs: {}\n", self.inputs);
        for p in &self.probes {
            s.push_str(&p.render());
            s.push('\n');
        }
        s
    }
}

const JACOBIAN_CONSISTENCY_TOL: f64 = 1e-4;
const FLOW_FD_TOL: f64 = 1e-3;
const RANGE_TOL: f64 = 1e-8;

/// Run the continuous-time diagnostics suite on the configured problem at
/// the configured initialization.
pub fn cmd_flow(
    cfg: &ExperimentConfig,
    config_dir: &Path,
    quiet: bool,
) -> Result<FlowReport, CliError> {
    let seed = cfg.run.seeds.first().copied().unwrap_or(0);
    let (problem, _) = build_problem(cfg, seed, config_dir)?;
    let oracle = problem.oracle();
    let (x0, y0) = initial_point(cfg, &problem, seed);
    let params = FlowParams::for_problem(oracle);
    let inputs = format!(
        "family={} dim_x={} dim_y={} init={} seed={seed}",
        problem.family_name(),
        oracle.dim_x(),
        oracle.dim_y(),
        cfg.run.init,
    );
    let mut probes = Vec::new();

    // 1. Flow convergence from the configured initialization.
    let flow = integrate_gf(oracle, &x0, &y0, &params)?;
    probes.push(ProbeOutcome {
        name: "flow_convergence",
        status: if flow.converged {
            ProbeStatus::Pass
        } else {
            ProbeStatus::Fail
        },
        value: Some(flow.samples.last().map(|s| s.grad_norm).unwrap_or(f64::NAN)),
        threshold: Some(params.stop_tol),
        detail: format!("t_final={:.3e} steps={}", flow.final_time, flow.steps),
    });
    let phi = flow.limit.clone();

    // 2. Exponential tail fit.
    probes.push(match rate_fit(&flow) {
        Ok(fit) => ProbeOutcome {
            name: "rate_fit",
            status: if fit.rate > 0.0 {
                ProbeStatus::Pass
            } else {
                ProbeStatus::Fail
            },
            value: Some(fit.rate),
            threshold: None,
            detail: format!(
                "amplitude={:.3e} samples={}",
                fit.amplitude, fit.samples_used
            ),
        },
        Err(e) => ProbeOutcome {
            name: "rate_fit",
            status: ProbeStatus::Skipped,
            value: None,
            threshold: None,
            detail: e.to_string(),
        },
    });

    // 3. Sensitivity limit against the implicit formula at the critical point.
    probes.push(
        match (
            integrate_sensitivity(oracle, &x0, &phi, &params),
            implicit_jacobian(oracle, &x0, &phi, 1e-10),
        ) {
            (Ok(sens), Ok(imp)) => {
                let mut diff = imp.clone();
                diff.add_scaled(-1.0, sens.jacobian.as_ref().unwrap());
                let err = diff.frob_norm();
                ProbeOutcome {
                    name: "implicit_jacobian_consistency",
                    status: if sens.converged && err <= JACOBIAN_CONSISTENCY_TOL {
                        ProbeStatus::Pass
                    } else {
                        ProbeStatus::Fail
                    },
                    value: Some(err),
                    threshold: Some(JACOBIAN_CONSISTENCY_TOL),
                    detail: String::new(),
                }
            }
            (sens, imp) => ProbeOutcome {
                name: "implicit_jacobian_consistency",
                status: ProbeStatus::Fail,
                value: None,
                threshold: Some(JACOBIAN_CONSISTENCY_TOL),
                detail: [
                    sens.err().map(|e| e.to_string()),
                    imp.err().map(|e| e.to_string()),
                ]
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
                .join("; "),
            },
        },
    );

    // 4. Sensitivity from the raw initialization against flow differences.
    probes.push(match integrate_sensitivity(oracle, &x0, &y0, &params) {
        Ok(sens) => {
            let fd = flow_jacobian_fd(oracle, &x0, &y0, 1e-4, &params)?;
            let u = sens.jacobian.as_ref().unwrap();
            let mut max_err = 0.0_f64;
            for i in 0..fd.rows() {
                for j in 0..fd.cols() {
                    max_err = max_err.max((fd[(i, j)] - u[(i, j)]).abs());
                }
            }
            ProbeOutcome {
                name: "sensitivity_vs_flow_fd",
                status: if sens.converged && max_err <= FLOW_FD_TOL {
                    ProbeStatus::Pass
                } else {
                    ProbeStatus::Fail
                },
                value: Some(max_err),
                threshold: Some(FLOW_FD_TOL),
                detail: String::new(),
            }
        }
        Err(e) => ProbeOutcome {
            name: "sensitivity_vs_flow_fd",
            status: ProbeStatus::Fail,
            value: None,
            threshold: Some(FLOW_FD_TOL),
            detail: e.to_string(),
        },
    });

    // 5. Łojasiewicz constant near the reached critical point.
    let mut rng = seeded_rng(seed ^ 0x10aa);
    probes.push(
        match lojasiewicz_probe(oracle, &x0, &phi, 0.05, 200, &mut rng) {
            Ok(est) => ProbeOutcome {
                name: "lojasiewicz",
                status: if est.mu_hat > 0.0 {
                    ProbeStatus::Pass
                } else {
                    ProbeStatus::Fail
                },
                value: Some(est.mu_hat),
                threshold: None,
                detail: format!("used={} skipped={}", est.used, est.skipped),
            },
            Err(e) => ProbeOutcome {
                name: "lojasiewicz",
                status: ProbeStatus::Skipped,
                value: None,
                threshold: None,
                detail: e.to_string(),
            },
        },
    );

    // 6. Range condition of the cross block at the critical point.
    probes.push(match range_probe(oracle, &x0, &phi, 1e-10) {
        Ok(res) => ProbeOutcome {
            name: "range_condition",
            status: if res <= RANGE_TOL {
                ProbeStatus::Pass
            } else {
                ProbeStatus::Fail
            },
            value: Some(res),
            threshold: Some(RANGE_TOL),
            detail: String::new(),
        },
        Err(e) => ProbeOutcome {
            name: "range_condition",
            status: ProbeStatus::Fail,
            value: None,
            threshold: Some(RANGE_TOL),
            detail: e.to_string(),
        },
    });

    // 7. Negative control: a landscape violating the range condition must
    //    report full out-of-range mass.
    let defect = RangeDefectProblem;
    probes.push(match range_probe(&defect, &[0.0], &[0.0, 0.0], 1e-10) {
        Ok(res) => ProbeOutcome {
            name: "range_negative_control",
            status: if (res - 1.0).abs() <= 1e-6 {
                ProbeStatus::Pass
            } else {
                ProbeStatus::Fail
            },
            value: Some(res),
            threshold: Some(1.0),
            detail: "expected residual 1".into(),
        },
        Err(e) => ProbeOutcome {
            name: "range_negative_control",
            status: ProbeStatus::Fail,
            value: None,
            threshold: Some(1.0),
            detail: e.to_string(),
        },
    });

    let report = FlowReport { inputs, probes };
    if !quiet {
        print!("{}", report.render());
        let _ = std::io::stdout().flush();
    }
    Ok(report)
}

/// Generate the configured problem and serialize it.
pub fn cmd_generate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    config_dir: &Path,
    quiet: bool,
) -> Result<PathBuf, CliError> {
    let seed = cfg.run.seeds.first().copied().unwrap_or(0);
    let (problem, meta) = build_problem(cfg, seed, config_dir)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", out_dir.display())))?;
    let path = out_dir.join(format!("{}_problem.txt", cfg.run.out));
    fs::write(&path, problem_to_text(&problem, &meta))
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    if !quiet {
        println!("wrote {}", path.display());
    }
    Ok(path)
}
