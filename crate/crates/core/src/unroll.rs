//! Finite gradient-descent maps on the lower objective and reverse-mode
//! differentiation of the unrolled upper objective.
//!
//! `unroll` applies `T` plain gradient steps `y ← y − α ∂_y g(x, y)` with a
//! constant scalar step and stores the whole trajectory so the reverse sweep
//! can re-evaluate Hessian products at the stored iterates. `warm_start` is
//! the same map without retained trajectory: its output is treated as a
//! constant by differentiation downstream.

use crate::linalg::{all_finite, axpy, norm};
use crate::problems::ProblemOracle;
use crate::{Error, Result};

/// Trajectory of an unrolled descent: `trajectory[t]` is the iterate after
/// `t` steps (so it has length `steps + 1`).
#[derive(Debug, Clone)]
pub struct UnrollResult {
    pub trajectory: Vec<Vec<f64>>,
    pub step: f64,
}

impl UnrollResult {
    pub fn y_final(&self) -> &[f64] {
        self.trajectory
            .last()
            .expect("trajectory always holds the start point")
    }

    pub fn steps(&self) -> usize {
        self.trajectory.len() - 1
    }
}

/// Both components of the unrolled hypergradient at `(x, y)`:
/// `grad_x = ∂_x f(x, φ_T(x,y))` through the unrolled steps, `grad_y` the
/// matching derivative in the initial `y`.
#[derive(Debug, Clone)]
pub struct HyperGrad {
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub y_final: Vec<f64>,
}

fn validate<P: ProblemOracle + ?Sized>(p: &P, x: &[f64], y: &[f64], step: f64) -> Result<()> {
    if x.len() != p.dim_x() || y.len() != p.dim_y() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: got x:{} y:{}, problem is {}x{}",
            x.len(),
            y.len(),
            p.dim_x(),
            p.dim_y()
        )));
    }
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "step must be positive, got {step}"
        )));
    }
    Ok(())
}

/// `T` gradient steps on `y ↦ g(x, y)` from `y`, with the trajectory kept
/// for reverse-mode differentiation. Zero steps returns `y` unchanged.
///
/// Steps above `1/L` are accepted (callers may warn); a non-finite iterate
/// reports `Diverged`.
pub fn unroll<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    steps: usize,
    step: f64,
) -> Result<UnrollResult> {
    validate(p, x, y, step)?;
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(y.to_vec());
    let mut current = y.to_vec();
    for t in 0..steps {
        let g = p.grad_lower_y(x, &current);
        axpy(-step, &g, &mut current);
        if !all_finite(&current) {
            return Err(Error::Diverged(format!(
                "unrolled iterate became non-finite at step {} (step size {step} too large?)",
                t + 1
            )));
        }
        trajectory.push(current.clone());
    }
    Ok(UnrollResult { trajectory, step })
}

/// Warm-start map: `M` gradient steps whose output is treated as
/// non-differentiated downstream. `M = 0` is the identity.
pub fn warm_start<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    steps: usize,
    step: f64,
) -> Result<Vec<f64>> {
    validate(p, x, y, step)?;
    let mut current = y.to_vec();
    for t in 0..steps {
        let g = p.grad_lower_y(x, &current);
        axpy(-step, &g, &mut current);
        if !all_finite(&current) {
            return Err(Error::Diverged(format!(
                "warm-start iterate became non-finite at step {} (step size {step} too large?)",
                t + 1
            )));
        }
    }
    Ok(current)
}

/// Reverse-mode differentiation of `L_T(x, y) = f(x, φ_T(x, y))`.
///
/// Forward: run [`unroll`]. Reverse: initialize the adjoint
/// `a = ∂_y f(x, y^T)` and `grad_x = ∂_x f(x, y^T)`, then walk the stored
/// iterates backwards accumulating
/// `grad_x ← grad_x − α · ∂_x⟨∂_y g(x, y^t), a⟩` and
/// `a ← a − α · ∂²_yy g(x, y^t) a`. With zero steps this is just
/// `(∂_x f, ∂_y f)` at `(x, y)`.
pub fn unrolled_hypergrad<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    steps: usize,
    step: f64,
) -> Result<HyperGrad> {
    let fwd = unroll(p, x, y, steps, step)?;
    let y_final = fwd.y_final().to_vec();
    let mut grad_x = p.grad_upper_x(x, &y_final);
    let mut adjoint = p.grad_upper_y(x, &y_final);
    for t in (0..steps).rev() {
        let yt = &fwd.trajectory[t];
        let cross = p.hvp_xy(x, yt, &adjoint);
        axpy(-step, &cross, &mut grad_x);
        let hv = p.hvp_yy(x, yt, &adjoint);
        axpy(-step, &hv, &mut adjoint);
    }
    if !all_finite(&grad_x) || !all_finite(&adjoint) {
        return Err(Error::Diverged(
            "reverse sweep produced non-finite hypergradient".into(),
        ));
    }
    Ok(HyperGrad {
        grad_x,
        grad_y: adjoint,
        y_final,
    })
}

/// Convenience: `‖∂_y g(x, y)‖`.
pub fn lower_grad_norm<P: ProblemOracle + ?Sized>(p: &P, x: &[f64], y: &[f64]) -> f64 {
    norm(&p.grad_lower_y(x, y))
}
