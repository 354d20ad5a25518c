//! Continuous-time verification suite.
//!
//! The selection map is realized as the limit of the gradient flow
//! `ẏ = −∂_y g(x, y)`; its Jacobian in `x` is the limit of the linear
//! sensitivity system `Ẇ = −(∂²_yy g · W + ∂²_yx g)`. This module integrates
//! both with classical fixed-step RK4 and provides the numerical probes used
//! to confirm the theory on concrete landscapes: the implicit pseudo-inverse
//! Jacobian at critical points, a Łojasiewicz-constant estimate, the
//! range-condition residual of the cross block, and an exponential-decay fit
//! of the flow's tail.

use rand::Rng;

use crate::linalg::{
    self, add, all_finite, dot, norm, pinv_psd_apply, range_project, scaled, sub, Mat,
};
use crate::problems::{dense_cross_yx, dense_hessian_yy, ProblemOracle};
use crate::unroll::lower_grad_norm;
use crate::{Error, Result};

/// Integration controls. Defaults come from [`FlowParams::for_problem`].
#[derive(Debug, Clone)]
pub struct FlowParams {
    /// RK4 step.
    pub step: f64,
    /// Stop when ‖∂_y g‖ drops to this.
    pub stop_tol: f64,
    /// Give up (flag `converged = false`) at this flow time.
    pub t_max: f64,
    /// Extra stopping requirement for the sensitivity system:
    /// ‖∂²_yy g · W + ∂²_yx g‖_F below this.
    pub sens_tol: f64,
    /// Trajectory samples are recorded at geometrically growing times with
    /// this ratio.
    pub sample_ratio: f64,
    /// ‖W‖_F beyond this reports `SensitivityDiverged`.
    pub divergence_bound: f64,
}

impl FlowParams {
    /// Defaults scaled to the problem: `step = 0.5/L`.
    pub fn for_problem<P: ProblemOracle + ?Sized>(p: &P) -> Self {
        let l = p.smoothness_bound().max(f64::MIN_POSITIVE);
        FlowParams {
            step: 0.5 / l,
            stop_tol: 1e-10,
            t_max: 1e4,
            sens_tol: 1e-8,
            sample_ratio: 1.15,
            divergence_bound: 1e8,
        }
    }
}

/// One recorded trajectory point.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub t: f64,
    pub y: Vec<f64>,
    pub grad_norm: f64,
}

/// Result of a flow (and optionally sensitivity) integration.
#[derive(Debug, Clone)]
pub struct FlowResult {
    /// The flow's end point (the selection estimate when `converged`).
    pub limit: Vec<f64>,
    /// Sensitivity limit, `dim_y × dim_x`, column `j` the response of the
    /// limit to `x_j`. Present only for sensitivity integrations.
    pub jacobian: Option<Mat>,
    pub samples: Vec<FlowSample>,
    pub steps: usize,
    pub final_time: f64,
    pub converged: bool,
}

fn validate_point<P: ProblemOracle + ?Sized>(p: &P, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != p.dim_x() || y.len() != p.dim_y() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: got x:{} y:{}, problem is {}x{}",
            x.len(),
            y.len(),
            p.dim_x(),
            p.dim_y()
        )));
    }
    if !(p.dim_x() * p.dim_y() <= 1_000_000) {
        return Err(Error::Unsupported(
            "sensitivity storage limited to 1e6 entries".into(),
        ));
    }
    Ok(())
}

/// Integrate the gradient flow `ẏ = −∂_y g(x, y)` from `y` with fixed-step
/// RK4 until criticality (`stop_tol`) or `t_max`. Samples are recorded at
/// geometric time intervals plus the initial and final points.
pub fn integrate_gf<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    params: &FlowParams,
) -> Result<FlowResult> {
    validate_point(p, x, y)?;
    let bad_step = params.step.is_nan() || params.step <= 0.0;
    if bad_step || params.stop_tol.is_nan() || params.stop_tol < 0.0 {
        return Err(Error::InvalidInput(
            "step and stop_tol must be positive".into(),
        ));
    }
    let h = params.step;
    let mut y = y.to_vec();
    let mut t = 0.0_f64;
    let mut steps = 0usize;
    let mut samples = Vec::new();
    let mut next_sample = 0.0_f64;
    let mut converged = false;
    loop {
        let g = p.grad_lower_y(x, &y);
        if !all_finite(&g) {
            return Err(Error::Diverged(format!(
                "flow gradient non-finite at t = {t}"
            )));
        }
        let gn = norm(&g);
        if t >= next_sample {
            samples.push(FlowSample {
                t,
                y: y.clone(),
                grad_norm: gn,
            });
            next_sample = (t * params.sample_ratio).max(t + h);
        }
        if gn <= params.stop_tol {
            converged = true;
            break;
        }
        if t >= params.t_max {
            break;
        }
        rk4_state_step(p, x, &mut y, h, &g)?;
        steps += 1;
        t += h;
    }
    let gn = lower_grad_norm(p, x, &y);
    if samples.last().map(|s| s.t) != Some(t) {
        samples.push(FlowSample {
            t,
            y: y.clone(),
            grad_norm: gn,
        });
    }
    Ok(FlowResult {
        limit: y,
        jacobian: None,
        samples,
        steps,
        final_time: t,
        converged,
    })
}

fn rk4_state_step<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &mut [f64],
    h: f64,
    k1: &[f64],
) -> Result<()> {
    // k1 is the already-evaluated gradient at y; the field is −∂_y g.
    let k1: Vec<f64> = scaled(-1.0, k1);
    let y2 = add(y, &scaled(0.5 * h, &k1));
    let k2 = scaled(-1.0, &p.grad_lower_y(x, &y2));
    let y3 = add(y, &scaled(0.5 * h, &k2));
    let k3 = scaled(-1.0, &p.grad_lower_y(x, &y3));
    let y4 = add(y, &scaled(h, &k3));
    let k4 = scaled(-1.0, &p.grad_lower_y(x, &y4));
    for i in 0..y.len() {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if !all_finite(y) {
        return Err(Error::Diverged("flow iterate became non-finite".into()));
    }
    Ok(())
}

/// `−(∂²_yy g(x, y_state) · W + ∂²_yx g(x, y_state))`, the sensitivity field.
fn sensitivity_rhs<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y_state: &[f64],
    w: &Mat,
) -> Result<Mat> {
    let dy = p.dim_y();
    let dx = p.dim_x();
    let cross = dense_cross_probe(p, x, y_state)?;
    let mut rhs = Mat::zeros(dy, dx);
    for j in 0..dx {
        let col = w.col(j);
        let hcol = p.hvp_yy(x, y_state, &col);
        for i in 0..dy {
            rhs[(i, j)] = -(hcol[i] + cross[(i, j)]);
        }
    }
    Ok(rhs)
}

// Cross block without the dense-probe dimension cap (the 1e6-entry guard in
// validate_point already bounds the work here).
fn dense_cross_probe<P: ProblemOracle + ?Sized>(p: &P, x: &[f64], y: &[f64]) -> Result<Mat> {
    let dy = p.dim_y();
    let dx = p.dim_x();
    let mut b = Mat::zeros(dy, dx);
    let mut e = vec![0.0; dy];
    for i in 0..dy {
        e[i] = 1.0;
        let row = p.hvp_xy(x, y, &e);
        for j in 0..dx {
            b[(i, j)] = row[j];
        }
        e[i] = 0.0;
    }
    Ok(b)
}

/// Co-integrate the flow and its sensitivity system
/// `Ẇ = −(∂²_yy g(x, y_t) W + ∂²_yx g(x, y_t))`, `W_0 = 0`.
///
/// Stops when the flow is critical *and* the sensitivity field is stationary
/// (`‖∂²_yy g · W + ∂²_yx g‖_F ≤ sens_tol`, the limit linear equation). A
/// growing `W` (the flow limit is not a stable minimum) reports
/// `SensitivityDiverged`.
pub fn integrate_sensitivity<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    params: &FlowParams,
) -> Result<FlowResult> {
    validate_point(p, x, y)?;
    let h = params.step;
    let dy = p.dim_y();
    let dx = p.dim_x();
    let mut y = y.to_vec();
    let mut w = Mat::zeros(dy, dx);
    let mut t = 0.0_f64;
    let mut steps = 0usize;
    let mut samples = Vec::new();
    let mut next_sample = 0.0_f64;
    let mut converged = false;
    loop {
        let g = p.grad_lower_y(x, &y);
        if !all_finite(&g) {
            return Err(Error::Diverged(format!(
                "flow gradient non-finite at t = {t}"
            )));
        }
        let gn = norm(&g);
        let w_rhs = sensitivity_rhs(p, x, &y, &w)?;
        let stationarity = w_rhs.frob_norm();
        if !w.is_finite() || w.frob_norm() > params.divergence_bound {
            return Err(Error::SensitivityDiverged(format!(
                "‖W‖_F = {:.3e} at t = {t} (flow limit is not a stable minimum)",
                w.frob_norm()
            )));
        }
        if t >= next_sample {
            samples.push(FlowSample {
                t,
                y: y.clone(),
                grad_norm: gn,
            });
            next_sample = (t * params.sample_ratio).max(t + h);
        }
        if gn <= params.stop_tol && stationarity <= params.sens_tol {
            converged = true;
            break;
        }
        if t >= params.t_max {
            break;
        }
        // Joint RK4 stage evaluations.
        let k1y = scaled(-1.0, &g);
        let k1w = w_rhs;
        let y2 = add(&y, &scaled(0.5 * h, &k1y));
        let mut w2 = w.clone();
        w2.add_scaled(0.5 * h, &k1w);
        let k2y = scaled(-1.0, &p.grad_lower_y(x, &y2));
        let k2w = sensitivity_rhs(p, x, &y2, &w2)?;
        let y3 = add(&y, &scaled(0.5 * h, &k2y));
        let mut w3 = w.clone();
        w3.add_scaled(0.5 * h, &k2w);
        let k3y = scaled(-1.0, &p.grad_lower_y(x, &y3));
        let k3w = sensitivity_rhs(p, x, &y3, &w3)?;
        let y4 = add(&y, &scaled(h, &k3y));
        let mut w4 = w.clone();
        w4.add_scaled(h, &k3w);
        let k4y = scaled(-1.0, &p.grad_lower_y(x, &y4));
        let k4w = sensitivity_rhs(p, x, &y4, &w4)?;
        for i in 0..dy {
            y[i] += h / 6.0 * (k1y[i] + 2.0 * k2y[i] + 2.0 * k3y[i] + k4y[i]);
        }
        w.add_scaled(h / 6.0, &k1w);
        w.add_scaled(h / 3.0, &k2w);
        w.add_scaled(h / 3.0, &k3w);
        w.add_scaled(h / 6.0, &k4w);
        if !all_finite(&y) {
            return Err(Error::Diverged("flow iterate became non-finite".into()));
        }
        steps += 1;
        t += h;
    }
    let gn = lower_grad_norm(p, x, &y);
    if samples.last().map(|s| s.t) != Some(t) {
        samples.push(FlowSample {
            t,
            y: y.clone(),
            grad_norm: gn,
        });
    }
    Ok(FlowResult {
        limit: y,
        jacobian: Some(w),
        samples,
        steps,
        final_time: t,
        converged,
    })
}

/// The implicit Jacobian at a critical point `y`:
/// `−(∂²_yy g)† ∂²_yx g`, shape `dim_y × dim_x`.
///
/// `y` must be critical (`‖∂_y g‖ ≤ 1e−8`); a Hessian eigenvalue below
/// `−rank_tol · λ_max` means `y` is not a local minimum and the formula does
/// not apply.
pub fn implicit_jacobian<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    rank_tol: f64,
) -> Result<Mat> {
    validate_point(p, x, y)?;
    let gn = lower_grad_norm(p, x, y);
    if gn > 1e-8 {
        return Err(Error::PreconditionViolated(format!(
            "implicit_jacobian needs a critical point; ‖∂_y g‖ = {gn:.3e}"
        )));
    }
    let hess = dense_hessian_yy(p, x, y)?;
    let eig = linalg::sym_eig(&hess)?;
    let cross = dense_cross_yx(p, x, y)?;
    let mut jac = Mat::zeros(p.dim_y(), p.dim_x());
    for j in 0..p.dim_x() {
        let col = cross.col(j);
        let solved = match pinv_psd_apply(&eig, &col, rank_tol) {
            Ok(v) => v,
            Err(Error::NotPsd(msg)) => return Err(Error::NotLocalMin(msg)),
            Err(e) => return Err(e),
        };
        jac.set_col(j, &scaled(-1.0, &solved));
    }
    Ok(jac)
}

/// Relative out-of-range mass of the cross block at a critical point:
/// `‖(I − A A†) ∂²_yx g‖_F / max(1, ‖∂²_yx g‖_F)` with `A = ∂²_yy g`.
///
/// Zero (up to tolerance) is the structural condition that makes the limit
/// linear equation solvable; the hand-built defect problem returns 1.
pub fn range_probe<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    rank_tol: f64,
) -> Result<f64> {
    validate_point(p, x, y)?;
    let gn = lower_grad_norm(p, x, y);
    if gn > 1e-8 {
        return Err(Error::PreconditionViolated(format!(
            "range_probe needs a critical point; ‖∂_y g‖ = {gn:.3e}"
        )));
    }
    let hess = dense_hessian_yy(p, x, y)?;
    let eig = linalg::sym_eig(&hess)?;
    let cross = dense_cross_yx(p, x, y)?;
    let mut out_sq = 0.0;
    for j in 0..p.dim_x() {
        let col = cross.col(j);
        let proj = range_project(&eig, &col, rank_tol);
        let out = sub(&col, &proj);
        out_sq += dot(&out, &out);
    }
    Ok(out_sq.sqrt() / cross.frob_norm().max(1.0))
}

/// Łojasiewicz-constant estimate around a critical point.
#[derive(Debug, Clone)]
pub struct LojasiewiczEstimate {
    /// min over samples of ½‖∂_y g‖² / |g − G(x)|.
    pub mu_hat: f64,
    /// The sample attaining the minimum.
    pub worst_x: Vec<f64>,
    pub worst_y: Vec<f64>,
    /// Samples entering the minimum.
    pub used: usize,
    /// Samples whose flow failed to converge (skipped).
    pub skipped: usize,
}

/// Sample the Łojasiewicz ratio `½‖∂_y g(x, y)‖² / |g(x, y) − G(x)|` over a
/// product ball of the given radius around the critical point `(x0, y0)`.
///
/// `G(x)` is measured as `g` at the flow limit from `y0` under the sampled
/// `x` (the nearby critical value), not assumed constant. Samples whose
/// value gap is below 1e−12 are ignored; samples whose flow fails to
/// converge are skipped and counted.
pub fn lojasiewicz_probe<P: ProblemOracle + ?Sized, R: Rng>(
    p: &P,
    x0: &[f64],
    y0: &[f64],
    radius: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<LojasiewiczEstimate> {
    validate_point(p, x0, y0)?;
    let gn = lower_grad_norm(p, x0, y0);
    if gn > 1e-8 {
        return Err(Error::PreconditionViolated(format!(
            "lojasiewicz_probe needs a critical point; ‖∂_y g‖ = {gn:.3e}"
        )));
    }
    let params = FlowParams::for_problem(p);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for _ in 0..n_samples {
        let (xs, ys) = crate::problems::product_ball_sample(rng, x0, y0, radius);
        let flow = integrate_gf(p, &xs, y0, &params)?;
        if !flow.converged {
            skipped += 1;
            continue;
        }
        let critical_value = p.lower_value(&xs, &flow.limit);
        let gap = (p.lower_value(&xs, &ys) - critical_value).abs();
        if gap <= 1e-12 {
            continue;
        }
        let grad = p.grad_lower_y(&xs, &ys);
        let ratio = 0.5 * dot(&grad, &grad) / gap;
        used += 1;
        if best.as_ref().map(|(b, _, _)| ratio < *b).unwrap_or(true) {
            best = Some((ratio, xs, ys));
        }
    }
    match best {
        Some((mu_hat, worst_x, worst_y)) => Ok(LojasiewiczEstimate {
            mu_hat,
            worst_x,
            worst_y,
            used,
            skipped,
        }),
        None => Err(Error::InsufficientData(
            "no sample produced a usable value gap".into(),
        )),
    }
}

/// Exponential tail fit of a flow trajectory.
#[derive(Debug, Clone)]
pub struct RateFit {
    /// C in distance ≈ C e^(−μ t).
    pub amplitude: f64,
    /// μ.
    pub rate: f64,
    pub samples_used: usize,
}

/// Least-squares fit of `log ‖y_t − φ‖` against `t` over the tail of the
/// trajectory (samples with distance below 0.1). Needs at least ten usable
/// samples.
pub fn rate_fit(result: &FlowResult) -> Result<RateFit> {
    let limit = &result.limit;
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for s in &result.samples {
        let dist = norm(&sub(&s.y, limit));
        if dist > 0.0 && dist < 1e-1 {
            ts.push(s.t);
            logs.push(dist.ln());
        }
    }
    if ts.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "only {} tail samples with distance in (0, 0.1); need 10",
            ts.len()
        )));
    }
    let n = ts.len() as f64;
    let mean_t = ts.iter().sum::<f64>() / n;
    let mean_l = logs.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (t, l) in ts.iter().zip(&logs) {
        cov += (t - mean_t) * (l - mean_l);
        var += (t - mean_t) * (t - mean_t);
    }
    if var == 0.0 {
        return Err(Error::InsufficientData("degenerate time samples".into()));
    }
    let slope = cov / var;
    let intercept = mean_l - slope * mean_t;
    Ok(RateFit {
        amplitude: intercept.exp(),
        rate: -slope,
        samples_used: ts.len(),
    })
}

/// Central finite differences of the flow limit over `x`-perturbations: the
/// reference Jacobian the sensitivity integration is checked against.
pub fn flow_jacobian_fd<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    h_x: f64,
    params: &FlowParams,
) -> Result<Mat> {
    validate_point(p, x, y)?;
    let mut jac = Mat::zeros(p.dim_y(), p.dim_x());
    for j in 0..p.dim_x() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h_x;
        xm[j] -= h_x;
        let fp = integrate_gf(p, &xp, y, params)?;
        let fm = integrate_gf(p, &xm, y, params)?;
        if !fp.converged || !fm.converged {
            return Err(Error::NumericalFailure(
                "perturbed flow failed to converge for the finite-difference Jacobian".into(),
            ));
        }
        let col: Vec<f64> = fp
            .limit
            .iter()
            .zip(&fm.limit)
            .map(|(a, b)| (a - b) / (2.0 * h_x))
            .collect();
        jac.set_col(j, &col);
    }
    Ok(jac)
}
