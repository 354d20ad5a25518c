//! Outer loop for bilevel games with selection.
//!
//! One iteration: warm-start the lower variable, unroll `T` gradient steps,
//! differentiate the unrolled upper objective `L_T(x, y) = f(x, φ_T(x, y))`,
//! optionally add the implicit pseudo-inverse correction, and take a
//! gradient step on `x`:
//!
//! ```text
//! ỹ_k = I_M(x_{k−1}, y_{k−1})          # warm start (not differentiated)
//! y_k = φ_T(x_{k−1}, ỹ_k)             # unrolled descent
//! d_k = ∂_x L_T(x_{k−1}, ỹ_k)
//! if correction: d_k += ∂_x⟨∂_y g(x_{k−1}, y_k), ξ_k⟩,
//!                ξ_k ≈ −(∂²_yy g(x_{k−1}, y_k))† ∂_y L_T(x_{k−1}, ỹ_k)
//! x_k = x_{k−1} − γ d_k
//! ```
//!
//! The run records one trace row per iteration and stops early when both
//! `‖d_k‖ ≤ tol_upper` and `‖∂_y g(x_k, y_k)‖ ≤ tol_lower`.

use std::time::Instant;

use crate::correction::{correction_direction, LsConfig, LsMode, LsState};
use crate::linalg::{axpy, norm};
use crate::problems::{ClosedFormEquilibrium, ProblemOracle, DENSE_PROBE_LIMIT};
use crate::unroll::{unrolled_hypergrad, warm_start};
use crate::{Error, Result};

/// All knobs of one solver run.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Outer iteration cap K.
    pub outer_iters: usize,
    /// Unroll steps T (differentiated).
    pub unroll_steps: usize,
    /// Warm-start steps M (not differentiated).
    pub warm_start_steps: usize,
    /// Outer step γ on x.
    pub outer_step: f64,
    /// Inner step α for the lower-level descent.
    pub inner_step: f64,
    pub add_correction: bool,
    pub ls: LsConfig,
    /// Stop when ‖d_k‖ drops to this.
    pub tol_upper: f64,
    /// ... and ‖∂_y g(x_k, y_k)‖ to this.
    pub tol_lower: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            outer_iters: 1000,
            unroll_steps: 1,
            warm_start_steps: 0,
            outer_step: 0.1,
            inner_step: 0.1,
            add_correction: false,
            ls: LsConfig::default(),
            tol_upper: 1e-10,
            tol_lower: 1e-10,
        }
    }
}

impl SolverConfig {
    /// Hard validity checks. `T + M > 0` is required: with neither unrolling
    /// nor warm start the lower variable never moves and fixed points carry
    /// no criticality information.
    pub fn validate(&self) -> Result<()> {
        if self.unroll_steps + self.warm_start_steps == 0 {
            return Err(Error::InvalidInput(
                "T + M > 0 required (unroll_steps + warm_start_steps)".into(),
            ));
        }
        if !self.outer_step.is_finite() || self.outer_step <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "outer_step must be positive, got {}",
                self.outer_step
            )));
        }
        if !self.inner_step.is_finite() || self.inner_step <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "inner_step must be positive, got {}",
                self.inner_step
            )));
        }
        if self.tol_upper < 0.0 || self.tol_lower < 0.0 {
            return Err(Error::InvalidInput(
                "tolerances must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Non-fatal advisories (the run proceeds).
    pub fn warnings(&self, smoothness: f64) -> Vec<String> {
        let mut out = Vec::new();
        if smoothness > 0.0 && self.inner_step > 1.0 / smoothness {
            out.push(format!(
                "inner_step {} exceeds 1/L = {:.6} (descent not guaranteed)",
                self.inner_step,
                1.0 / smoothness
            ));
        }
        out
    }
}

/// Named parameter fragments reproducing the standard algorithm families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetFragment {
    pub unroll_steps: usize,
    pub warm_start_steps: usize,
    pub add_correction: bool,
}

/// Resolve a preset name into its (T, M, correction) pattern:
///
/// | name                      | T  | M  | correction |
/// |---------------------------|----|----|------------|
/// | `itd`                     | >0 | 0  | off        |
/// | `corrected_itd`           | >0 | 0  | on         |
/// | `truncated_itd`           | >0 | >0 | off        |
/// | `corrected_truncated_itd` | >0 | >0 | on         |
/// | `aid`                     | 0  | >0 | on         |
///
/// The returned counts are the smallest in each class; callers override them
/// per run.
pub fn preset(name: &str) -> Result<PresetFragment> {
    match name {
        "itd" => Ok(PresetFragment {
            unroll_steps: 1,
            warm_start_steps: 0,
            add_correction: false,
        }),
        "corrected_itd" => Ok(PresetFragment {
            unroll_steps: 1,
            warm_start_steps: 0,
            add_correction: true,
        }),
        "truncated_itd" => Ok(PresetFragment {
            unroll_steps: 1,
            warm_start_steps: 1,
            add_correction: false,
        }),
        "corrected_truncated_itd" => Ok(PresetFragment {
            unroll_steps: 1,
            warm_start_steps: 1,
            add_correction: true,
        }),
        "aid" => Ok(PresetFragment {
            unroll_steps: 0,
            warm_start_steps: 1,
            add_correction: true,
        }),
        other => Err(Error::InvalidInput(format!("unknown preset `{other}`"))),
    }
}

/// Why a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    /// Both gradient norms dropped below their thresholds.
    ToleranceReached,
    /// The iteration cap was exhausted.
    IterationCap,
    /// An inner map produced non-finite values at the recorded iteration.
    Diverged { iter: usize, message: String },
}

/// One per-iteration record.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub elapsed_s: f64,
    /// ‖d_k‖.
    pub upper_grad_norm: f64,
    /// ‖∂_y g(x_k, y_k)‖ after the x-update.
    pub lower_grad_norm: f64,
    /// Metric distance to the closed-form equilibrium, when available.
    pub dist_to_optimum: Option<f64>,
    /// Norm of the exact selection-composed gradient, when available.
    pub bgs_residual: Option<f64>,
}

/// Full record of a run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub x_final: Vec<f64>,
    pub y_final: Vec<f64>,
    pub stop: StopReason,
    pub warnings: Vec<String>,
    /// Final inner least-squares residual ‖Aξ + v‖ (corrected runs only).
    pub ls_residual: Option<f64>,
}

impl RunTrace {
    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    pub fn final_row(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// Run the outer loop from `(x0, y0)`.
///
/// A closed-form oracle, when supplied, fills the optional trace columns
/// (distance to the equilibrium and exact gradient residual). Divergence is
/// not an `Err`: the partial trace is returned with
/// [`StopReason::Diverged`] so callers can persist what was computed.
pub fn bgs_opt<P: ProblemOracle + ?Sized>(
    p: &P,
    cfg: &SolverConfig,
    x0: &[f64],
    y0: &[f64],
    closed_form: Option<&dyn ClosedFormEquilibrium>,
) -> Result<RunTrace> {
    cfg.validate()?;
    if x0.len() != p.dim_x() || y0.len() != p.dim_y() {
        return Err(Error::InvalidInput(format!(
            "initial point is {}x{}, problem is {}x{}",
            x0.len(),
            y0.len(),
            p.dim_x(),
            p.dim_y()
        )));
    }
    let warnings = cfg.warnings(p.smoothness_bound());
    let mut state = LsState::new(cfg.ls.clone(), p.dim_y());
    state.reset();
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut rows = Vec::new();
    let start = Instant::now();
    let mut stop = StopReason::IterationCap;
    for k in 1..=cfg.outer_iters {
        let step_result = (|| -> Result<Vec<f64>> {
            let y_tilde = warm_start(p, &x, &y, cfg.warm_start_steps, cfg.inner_step)?;
            let hg = unrolled_hypergrad(p, &x, &y_tilde, cfg.unroll_steps, cfg.inner_step)?;
            let mut d = hg.grad_x.clone();
            if cfg.add_correction {
                let c = correction_direction(p, &x, &hg.y_final, &hg.grad_y, &mut state)?;
                axpy(1.0, &c, &mut d);
            }
            y = hg.y_final;
            Ok(d)
        })();
        let d = match step_result {
            Ok(d) => d,
            Err(e) => {
                stop = StopReason::Diverged {
                    iter: k,
                    message: e.to_string(),
                };
                break;
            }
        };
        axpy(-cfg.outer_step, &d, &mut x);
        let upper_grad_norm = norm(&d);
        let lower_grad_norm = norm(&p.grad_lower_y(&x, &y));
        rows.push(TraceRow {
            iter: k,
            elapsed_s: start.elapsed().as_secs_f64(),
            upper_grad_norm,
            lower_grad_norm,
            dist_to_optimum: closed_form.map(|c| c.distance_to_optimum(&x)),
            bgs_residual: closed_form.map(|c| c.bgs_residual(&x, &y)),
        });
        if upper_grad_norm <= cfg.tol_upper && lower_grad_norm <= cfg.tol_lower {
            stop = StopReason::ToleranceReached;
            break;
        }
    }
    Ok(RunTrace {
        rows,
        x_final: x,
        y_final: y,
        stop,
        warnings,
        ls_residual: state.last_residual,
    })
}

/// Residuals of the equilibrium conditions at a point.
#[derive(Debug, Clone)]
pub struct EquilibriumResiduals {
    /// Norm of the selection-composed upper gradient, evaluated through
    /// the corrected hypergradient.
    pub upper: f64,
    /// ‖∂_y g(x, y)‖.
    pub lower: f64,
    /// ‖exact selection-composed gradient‖ when a closed form exists.
    pub bgs: Option<f64>,
}

/// Rank threshold used by [`equilibrium_residuals`]: loose enough to absorb
/// the O(tolerance) eigenvalue noise a terminated run leaves in the Hessian
/// of a degenerate landscape.
pub const DIAGNOSTIC_RANK_TOL: f64 = 1e-6;

/// Measure how far `(x, y)` is from an equilibrium.
///
/// The upper residual is the corrected hypergradient at `(x, y)` with zero
/// unroll steps, solved by a direct pseudo-inverse when `dim_y` permits and
/// by a fresh long conjugate-gradient solve otherwise (or by `ls` when
/// given).
pub fn equilibrium_residuals<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    closed_form: Option<&dyn ClosedFormEquilibrium>,
    ls: Option<&LsConfig>,
) -> Result<EquilibriumResiduals> {
    let lower = norm(&p.grad_lower_y(x, y));
    let config = match ls {
        Some(c) => c.clone(),
        None => {
            if p.dim_y() <= DENSE_PROBE_LIMIT {
                LsConfig {
                    mode: LsMode::DirectPinv,
                    rank_tol: DIAGNOSTIC_RANK_TOL,
                    ..LsConfig::default()
                }
            } else {
                LsConfig {
                    mode: LsMode::CgZ,
                    iters: 200,
                    ..LsConfig::default()
                }
            }
        }
    };
    let mut state = LsState::new(config, p.dim_y());
    let grad_x = p.grad_upper_x(x, y);
    let grad_y = p.grad_upper_y(x, y);
    let c = correction_direction(p, x, y, &grad_y, &mut state)?;
    let mut d = grad_x;
    axpy(1.0, &c, &mut d);
    Ok(EquilibriumResiduals {
        upper: norm(&d),
        lower,
        bgs: closed_form.map(|cf| cf.bgs_residual(x, y)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::problems::{quadratic_generate, QuadraticBilevel};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn scalar_quadratic() -> QuadraticBilevel {
        QuadraticBilevel::new(
            Mat::diag(&[1.0]),
            Mat::diag(&[2.0]),
            Mat::from_rows(1, 1, &[1.0]),
            vec![1.0],
        )
        .unwrap()
    }

    fn corrected_cfg() -> SolverConfig {
        SolverConfig {
            outer_iters: 500,
            unroll_steps: 1,
            warm_start_steps: 0,
            outer_step: 0.5,
            inner_step: 0.25,
            add_correction: true,
            ls: LsConfig {
                mode: LsMode::DirectPinv,
                ..LsConfig::default()
            },
            tol_upper: 1e-10,
            tol_lower: 1e-10,
        }
    }

    #[test]
    fn scalar_corrected_run_finds_equilibrium() {
        let q = scalar_quadratic();
        let trace = bgs_opt(&q, &corrected_cfg(), &[0.0], &[1.0], Some(&q)).unwrap();
        assert_eq!(trace.stop, StopReason::ToleranceReached);
        assert_close(trace.x_final[0], 0.5, 1e-8);
        assert!(trace.final_row().unwrap().dist_to_optimum.unwrap() <= 1e-8);
    }

    #[test]
    fn equilibrium_start_does_not_move() {
        let q = scalar_quadratic();
        // x* = 0.5, critical y for x*: 2y + 0.5 = 0.
        let x_star = [0.5];
        let y_star = [-0.25];
        let cfg = SolverConfig {
            outer_iters: 1,
            ..corrected_cfg()
        };
        let trace = bgs_opt(&q, &cfg, &x_star, &y_star, Some(&q)).unwrap();
        assert!((trace.x_final[0] - x_star[0]).abs() <= 1e-12);
    }

    #[test]
    fn uncorrected_limit_is_biased() {
        let q = quadratic_generate(20, 10, 2, 10.0, 0.99, 41).unwrap();
        let (x0, y0) = crate::problems::gaussian_init(&q, 41);
        let cfg = SolverConfig {
            outer_iters: 4000,
            unroll_steps: 5,
            warm_start_steps: 0,
            outer_step: 1.0,
            inner_step: 0.9,
            add_correction: false,
            ls: LsConfig::default(),
            tol_upper: 1e-8,
            tol_lower: 1e-8,
        };
        let trace = bgs_opt(&q, &cfg, &x0, &y0, Some(&q)).unwrap();
        assert_eq!(trace.stop, StopReason::ToleranceReached);
        // 0.9 exceeds 1/L here; the solver warns and proceeds.
        assert!(!trace.warnings.is_empty());
        let last = trace.final_row().unwrap();
        assert!(last.upper_grad_norm <= 1e-8);
        // The approximate gradient vanished, but the exact one did not.
        assert!(last.bgs_residual.unwrap() >= 1e-3);
        let res =
            equilibrium_residuals(&q, &trace.x_final, &trace.y_final, Some(&q), None).unwrap();
        assert!(res.lower <= 1e-8);
        assert!(res.bgs.unwrap() >= 1e-3);
    }

    #[test]
    fn corrected_termination_implies_equilibrium() {
        let q = quadratic_generate(12, 8, 2, 10.0, 0.99, 43).unwrap();
        let (x0, y0) = crate::problems::gaussian_init(&q, 43);
        let cfg = SolverConfig {
            outer_iters: 6000,
            unroll_steps: 2,
            warm_start_steps: 0,
            outer_step: 1.0,
            inner_step: 0.9,
            add_correction: true,
            ls: LsConfig {
                mode: LsMode::CgZ,
                iters: 20,
                ..LsConfig::default()
            },
            tol_upper: 1e-8,
            tol_lower: 1e-8,
        };
        let trace = bgs_opt(&q, &cfg, &x0, &y0, Some(&q)).unwrap();
        assert_eq!(trace.stop, StopReason::ToleranceReached);
        let res =
            equilibrium_residuals(&q, &trace.x_final, &trace.y_final, Some(&q), None).unwrap();
        assert!(res.upper <= 1e-7, "upper residual {}", res.upper);
        assert!(res.lower <= 1e-7, "lower residual {}", res.lower);
        assert!(res.bgs.unwrap() <= 1e-6);
        assert!(trace.ls_residual.is_some());
    }

    #[test]
    fn presets_match_their_families() {
        let aid = preset("aid").unwrap();
        assert_eq!(aid.unroll_steps, 0);
        assert!(aid.warm_start_steps > 0);
        assert!(aid.add_correction);
        let itd = preset("itd").unwrap();
        assert!(!itd.add_correction);
        assert_eq!(itd.warm_start_steps, 0);
        let citd = preset("corrected_itd").unwrap();
        assert_eq!(
            (itd.unroll_steps, itd.warm_start_steps),
            (citd.unroll_steps, citd.warm_start_steps)
        );
        assert!(citd.add_correction);
        assert!(preset("nonsense").is_err());
    }

    #[test]
    fn config_requires_progress_budget() {
        let cfg = SolverConfig {
            unroll_steps: 0,
            warm_start_steps: 0,
            ..SolverConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn equilibrium_residuals_examples() {
        let q = scalar_quadratic();
        let res = equilibrium_residuals(&q, &[0.5], &[-0.25], Some(&q), None).unwrap();
        assert!(res.upper <= 1e-10);
        assert!(res.lower <= 1e-10);
        assert!(res.bgs.unwrap() <= 1e-10);

        let res = equilibrium_residuals(&q, &[0.3], &[0.9], Some(&q), None).unwrap();
        assert!(res.lower > 0.0);
    }

    #[test]
    fn traces_are_deterministic() {
        let q = quadratic_generate(10, 6, 1, 5.0, 0.9, 45).unwrap();
        let (x0, y0) = crate::problems::gaussian_init(&q, 45);
        let cfg = SolverConfig {
            outer_iters: 50,
            unroll_steps: 3,
            warm_start_steps: 1,
            outer_step: 0.8,
            inner_step: 0.5,
            add_correction: true,
            ls: LsConfig::default(),
            tol_upper: 0.0,
            tol_lower: 0.0,
        };
        let a = bgs_opt(&q, &cfg, &x0, &y0, Some(&q)).unwrap();
        let b = bgs_opt(&q, &cfg, &x0, &y0, Some(&q)).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.iter, rb.iter);
            assert_eq!(ra.upper_grad_norm.to_bits(), rb.upper_grad_norm.to_bits());
            assert_eq!(ra.lower_grad_norm.to_bits(), rb.lower_grad_norm.to_bits());
            assert_eq!(
                ra.dist_to_optimum.unwrap().to_bits(),
                rb.dist_to_optimum.unwrap().to_bits()
            );
            assert_eq!(
                ra.bgs_residual.unwrap().to_bits(),
                rb.bgs_residual.unwrap().to_bits()
            );
        }
        assert_eq!(a.x_final, b.x_final);
        assert_eq!(a.y_final, b.y_final);
    }

    #[test]
    fn divergence_is_recorded_in_the_trace() {
        let q = scalar_quadratic();
        let cfg = SolverConfig {
            outer_iters: 50,
            unroll_steps: 1,
            inner_step: 1e9,
            outer_step: 1e9,
            ..SolverConfig::default()
        };
        let trace = bgs_opt(&q, &cfg, &[0.0], &[1.0], None).unwrap();
        match trace.stop {
            StopReason::Diverged { iter, .. } => assert!(iter >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
