//! Finite-difference verification of the analytic derivative surfaces.
//!
//! Central differences with steps scaled by the point's norm are compared
//! against the oracle's Hessian-vector products and against both components
//! of the unrolled hypergradient, at seeded random points. This is the
//! machinery behind the `check` command and the derivative acceptance tests.

use crate::linalg::{self, dot, norm, sub};
use crate::problems::ProblemOracle;
use crate::unroll::{unroll, unrolled_hypergrad};
use crate::Result;

/// Verification verdict for one operator.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    /// "hvp_yy", "hvp_xy", "grad_l_t_x" or "grad_l_t_y".
    pub operator: &'static str,
    pub max_rel_err: f64,
    /// Where the maximum was attained.
    pub worst_case: String,
    pub threshold: f64,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.threshold
    }
}

/// Report over all checked operators.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed())
    }
}

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = norm(analytic).max(norm(fd)).max(1e-8);
    norm(&sub(analytic, fd)) / scale
}

struct Tracker {
    operator: &'static str,
    max_rel_err: f64,
    worst_case: String,
}

impl Tracker {
    fn new(operator: &'static str) -> Self {
        Tracker {
            operator,
            max_rel_err: 0.0,
            worst_case: String::from("-"),
        }
    }

    fn observe(&mut self, err: f64, case: String) {
        if !err.is_finite() || err > self.max_rel_err {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst_case = case;
        }
    }

    fn entry(self, threshold: f64) -> CheckEntry {
        CheckEntry {
            operator: self.operator,
            max_rel_err: self.max_rel_err,
            worst_case: self.worst_case,
            threshold,
        }
    }
}

/// Run the finite-difference suite on a problem.
///
/// At `points_per_case` seeded random points, and for every `T` in
/// `unroll_steps`, compares `hvp_yy` against differences of `∂_y g`,
/// `hvp_xy` against differences of `⟨∂_y g, v⟩` in `x`, and both components
/// of the unrolled hypergradient against coordinate-wise differences of
/// `f(x, φ_T(x, y))`. Differencing steps are `1e−5 · max(1, ‖point‖)`.
pub fn fd_check<P: ProblemOracle + ?Sized>(
    p: &P,
    unroll_steps: &[usize],
    inner_step: f64,
    points_per_case: usize,
    seed: u64,
    threshold: f64,
) -> Result<CheckReport> {
    let mut rng = linalg::seeded_rng(seed);
    let dx = p.dim_x();
    let dy = p.dim_y();
    let mut hvp_yy = Tracker::new("hvp_yy");
    let mut hvp_xy = Tracker::new("hvp_xy");
    let mut grad_x = Tracker::new("grad_l_t_x");
    let mut grad_y = Tracker::new("grad_l_t_y");

    for point in 0..points_per_case {
        // Moderate-scale points keep every family inside its working region.
        let x = linalg::scaled(0.4, &linalg::gaussian_vec(&mut rng, dx));
        let y = linalg::scaled(0.4, &linalg::gaussian_vec(&mut rng, dy));
        let mut v = linalg::gaussian_vec(&mut rng, dy);
        let vn = norm(&v);
        if vn > 0.0 {
            for e in &mut v {
                *e /= vn;
            }
        }

        // hvp_yy against differences of ∂_y g along v.
        let h = 1e-5 * norm(&y).max(1.0);
        let yp = linalg::add(&y, &linalg::scaled(h, &v));
        let ym = linalg::add(&y, &linalg::scaled(-h, &v));
        let fd: Vec<f64> = sub(&p.grad_lower_y(&x, &yp), &p.grad_lower_y(&x, &ym))
            .iter()
            .map(|d| d / (2.0 * h))
            .collect();
        hvp_yy.observe(
            rel_err(&p.hvp_yy(&x, &y, &v), &fd),
            format!("point {point}"),
        );

        // hvp_xy against differences of ⟨∂_y g, v⟩ in x.
        let hx = 1e-5 * norm(&x).max(1.0);
        let mut fd = vec![0.0; dx];
        for j in 0..dx {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += hx;
            xm[j] -= hx;
            let sp = dot(&p.grad_lower_y(&xp, &y), &v);
            let sm = dot(&p.grad_lower_y(&xm, &y), &v);
            fd[j] = (sp - sm) / (2.0 * hx);
        }
        hvp_xy.observe(
            rel_err(&p.hvp_xy(&x, &y, &v), &fd),
            format!("point {point}"),
        );

        // Both hypergradient components against differences of L_T.
        for &steps in unroll_steps {
            let hg = unrolled_hypergrad(p, &x, &y, steps, inner_step)?;
            let value = |x: &[f64], y: &[f64]| -> Result<f64> {
                let out = unroll(p, x, y, steps, inner_step)?;
                Ok(p.upper_value(x, out.y_final()))
            };
            let mut fd = vec![0.0; dx];
            for j in 0..dx {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += hx;
                xm[j] -= hx;
                fd[j] = (value(&xp, &y)? - value(&xm, &y)?) / (2.0 * hx);
            }
            grad_x.observe(rel_err(&hg.grad_x, &fd), format!("T={steps} point {point}"));
            let mut fd = vec![0.0; dy];
            for j in 0..dy {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += h;
                ym[j] -= h;
                fd[j] = (value(&x, &yp)? - value(&x, &ym)?) / (2.0 * h);
            }
            grad_y.observe(rel_err(&hg.grad_y, &fd), format!("T={steps} point {point}"));
        }
    }
    Ok(CheckReport {
        entries: vec![
            hvp_yy.entry(threshold),
            hvp_xy.entry(threshold),
            grad_x.entry(threshold),
            grad_y.entry(threshold),
        ],
    })
}
